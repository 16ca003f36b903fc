#include "cgraflow/mapper.hpp"

#include <algorithm>
#include <cassert>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace cgraflow {

namespace {

constexpr long long kForever = 1ll << 60;

struct OperandRef {
  enum class Kind { Imm, Intra, LiveIn, Ignored } kind = Kind::Imm;
  int producer = -1;  // Intra: producing op index
  ValueId value = kNoValue;
  bool flag = false;
};

// Per-op operand classification shared by the model builder and validator.
std::vector<std::vector<OperandRef>> classify_operands(const BasicBlock& b) {
  std::map<ValueId, int> def_op;
  for (size_t i = 0; i < b.ops.size(); ++i)
    if (b.ops[i].result) def_op[*b.ops[i].result] = static_cast<int>(i);
  std::vector<std::vector<OperandRef>> out(b.ops.size());
  for (size_t i = 0; i < b.ops.size(); ++i) {
    const Operation& op = b.ops[i];
    bool has_flag = op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
                    is_flag_branch(op.opcode);
    for (size_t k = 0; k < op.operands.size(); ++k) {
      const Operand& x = op.operands[k];
      OperandRef ref;
      ref.flag = has_flag && k == 0;
      if (x.is_imm()) {
        ref.kind = OperandRef::Kind::Imm;
      } else if (def_op.count(x.value)) {
        ref.kind = OperandRef::Kind::Intra;
        ref.producer = def_op.at(x.value);
        ref.value = x.value;
      } else if (op.opcode == Opcode::Ret) {
        // The returned value stays wherever its producer put it.
        ref.kind = OperandRef::Kind::Ignored;
        ref.value = x.value;
      } else {
        ref.kind = OperandRef::Kind::LiveIn;  // params included
        ref.value = x.value;
      }
      out[i].push_back(ref);
    }
  }
  return out;
}

}  // namespace

BlockModel build_model(const CdfgFunction& f, const std::string& label,
                       const ArchConfig& arch, const LiveValueTable& table,
                       const LivenessSets& live) {
  BlockModel m;
  m.label = label;
  m.block_index = f.block_index(label);
  if (m.block_index < 0)
    throw std::runtime_error("build_model: no block " + label);
  const BasicBlock& b = f.blocks[m.block_index];
  m.nops = static_cast<int>(b.ops.size());
  m.term_index = m.nops - 1;
  auto refs = classify_operands(b);

  std::set<ValueId> incoming = live.in[m.block_index];
  for (const auto& p : b.params) incoming.insert(p.value);
  for (ValueId v : incoming) {
    BlockModel::LiveIn li;
    li.value = v;
    if (!table.contains(v))
      throw std::runtime_error("live-in %" + std::to_string(v) +
                               " missing from the live value table");
    li.rc = table.reg_class(v);
    li.pe = table.producer_pe(v);
    li.to_block_end = live.out[m.block_index].count(v) != 0;
    for (int i = 0; i < m.nops; ++i)
      for (const auto& r : refs[i])
        if (r.kind == OperandRef::Kind::LiveIn && r.value == v)
          li.consumers.push_back(i);
    std::sort(li.consumers.begin(), li.consumers.end());
    li.consumers.erase(std::unique(li.consumers.begin(), li.consumers.end()),
                       li.consumers.end());
    m.live_ins.push_back(std::move(li));
  }

  for (int i = 0; i < m.nops; ++i)
    for (const auto& r : refs[i])
      if (r.kind == OperandRef::Kind::Intra)
        m.deps.push_back(BlockModel::DepEdge{r.producer, i, r.flag});

  std::set<std::pair<int, int>> pairs;
  std::vector<int> mem_ops;
  for (int i = 0; i < m.nops; ++i)
    if (b.ops[i].opcode == Opcode::Load || b.ops[i].opcode == Opcode::Store)
      mem_ops.push_back(i);
  for (int s : mem_ops) {
    if (b.ops[s].opcode != Opcode::Store) continue;
    for (int mo : mem_ops) {
      if (mo == s) continue;
      pairs.insert(mo < s ? std::make_pair(mo, s) : std::make_pair(s, mo));
    }
  }
  m.mem_order.assign(pairs.begin(), pairs.end());

  for (int i = 0; i < m.nops; ++i) {
    if (!b.ops[i].result || !table.contains(*b.ops[i].result)) continue;
    ValueId v = *b.ops[i].result;
    int pe = table.producer_pe(v);
    if (pe >= 0) m.pinned_pe[i] = pe;
    m.class_groups[table.class_of(v)].push_back(i);
    bool out = live.out[m.block_index].count(v) != 0;
    if (out && table.reg_class(v) == RegClass::External)
      m.ext_live_outs.push_back(BlockModel::ExtLiveOut{v, i});
    if (out && table.reg_class(v) == RegClass::Internal)
      m.internal_out_defs[i] = table.class_of(v);
  }
  std::set<int> through_classes;
  for (ValueId v : live.out[m.block_index]) {
    if (!table.contains(v) || table.reg_class(v) != RegClass::Internal)
      continue;
    bool defined_here = false;
    for (int i = 0; i < m.nops; ++i)
      if (b.ops[i].result && *b.ops[i].result == v) defined_here = true;
    if (defined_here) continue;
    int pe = table.producer_pe(v);
    if (pe >= 0 && through_classes.insert(table.class_of(v)).second)
      m.internal_out_fixed[pe] += 1;
  }

  m.horizon = m.nops + static_cast<int>(m.live_ins.size()) +
              2 * (arch.rows + arch.cols);

  auto& cc = m.constraint_counts;
  for (const auto& li : m.live_ins) {
    cc[li.rc == RegClass::External ? "eq4" : "eq6"] +=
        static_cast<int>(li.consumers.size());
    if (li.rc == RegClass::External) cc["eq5"] += 1;
  }
  for (const auto& d : m.deps) {
    if (d.flag) {
      cc["flag"] += 1;
    } else {
      cc["eq7"] += 1;
      cc["eq9"] += 1;
      cc["eq10"] += 1;
    }
  }
  cc["eq8"] = m.nops;
  cc["eq11"] = m.nops;
  cc["eq12"] = static_cast<int>(m.ext_live_outs.size());
  cc["eq13"] = arch.num_pes();
  cc["eq14"] = static_cast<int>(m.mem_order.size());
  return m;
}

namespace {

// Feasibility of a (possibly partial) assignment. Live-ins without a fixed
// PE are anchored to their lowest-index placed consumer.
bool partial_feasible(const BasicBlock& b, const BlockModel& m,
                      const ArchConfig& arch,
                      const std::vector<OpPlacement>& ops, bool complete) {
  auto placed = [&](int i) { return ops[i].t >= 0; };

  std::set<std::pair<int, int>> used;
  for (int i = 0; i < m.nops; ++i) {
    if (!placed(i)) continue;
    if (!used.insert({ops[i].t, ops[i].pe}).second) return false;
  }

  for (const auto& [i, pe] : m.pinned_pe)
    if (placed(i) && ops[i].pe != pe) return false;
  for (const auto& [cls, group] : m.class_groups) {
    int pe = -1;
    for (int i : group) {
      if (!placed(i)) continue;
      if (pe < 0) pe = ops[i].pe;
      if (ops[i].pe != pe) return false;
    }
  }

  int t_control = placed(m.term_index) ? ops[m.term_index].t : -1;
  for (int i = 0; i < m.nops; ++i) {
    if (!placed(i)) continue;
    if (ops[i].t > m.horizon) return false;
    if (t_control >= 0 && i != m.term_index && ops[i].t >= t_control)
      return false;  // the branch row belongs to the branch alone
  }

  for (const auto& d : m.deps) {
    if (!placed(d.from) || !placed(d.to)) continue;
    if (ops[d.from].t + 1 > ops[d.to].t) return false;
    if (d.flag) {
      if (ops[d.to].pe != ops[d.from].pe) return false;
      for (int o = 0; o < m.nops; ++o) {
        if (!placed(o) || o == d.from || ops[o].pe != ops[d.from].pe) continue;
        if (!writes_flags(b.ops[o].opcode)) continue;
        if (ops[o].t > ops[d.from].t && ops[o].t < ops[d.to].t) return false;
      }
    } else {
      if (!arch.adjacent_or_same(ops[d.to].pe, ops[d.from].pe)) return false;
      for (int o = 0; o < m.nops; ++o) {
        if (!placed(o) || o == d.from || ops[o].pe != ops[d.from].pe) continue;
        if (!writes_rout(b.ops[o].opcode)) continue;
        if (ops[o].t > ops[d.from].t && ops[o].t < ops[d.to].t) return false;
      }
    }
  }

  for (const auto& [a, c] : m.mem_order) {
    if (!placed(a) || !placed(c)) continue;
    if (ops[a].t >= ops[c].t) return false;
  }
  // A single shared memory port for writes.
  std::set<int> store_cycles;
  for (int i = 0; i < m.nops; ++i) {
    if (!placed(i) || b.ops[i].opcode != Opcode::Store) continue;
    if (!store_cycles.insert(ops[i].t).second) return false;
  }

  for (const auto& li : m.live_ins) {
    int h = li.pe;
    if (h < 0)
      for (int c : li.consumers)
        if (placed(c)) {
          h = ops[c].pe;
          break;
        }
    if (h < 0) continue;
    for (int c : li.consumers) {
      if (!placed(c)) continue;
      if (li.rc == RegClass::Internal) {
        if (ops[c].pe != h) return false;
      } else if (!arch.adjacent_or_same(ops[c].pe, h)) {
        return false;
      }
    }
    if (li.rc == RegClass::External) {
      long long until = -1;
      if (li.to_block_end) {
        until = kForever;
      } else {
        for (int c : li.consumers)
          if (placed(c)) until = std::max<long long>(until, ops[c].t);
      }
      for (int o = 0; o < m.nops; ++o) {
        if (!placed(o) || ops[o].pe != h) continue;
        if (!writes_rout(b.ops[o].opcode)) continue;
        // Reads precede writes within a cycle; a write at the final read
        // cycle is harmless.
        if (ops[o].t < until) return false;
      }
    }
  }

  for (const auto& lo : m.ext_live_outs) {
    if (!placed(lo.def_op)) continue;
    for (int o = 0; o < m.nops; ++o) {
      if (!placed(o) || o == lo.def_op || ops[o].pe != ops[lo.def_op].pe)
        continue;
      if (!writes_rout(b.ops[o].opcode)) continue;
      if (ops[o].t > ops[lo.def_op].t) return false;
    }
  }

  std::map<int, std::set<int>> internal_classes;
  for (const auto& [i, cls] : m.internal_out_defs)
    if (placed(i)) internal_classes[ops[i].pe].insert(cls);
  for (int pe = 0; pe < arch.num_pes(); ++pe) {
    int fixed = 0;
    auto it = m.internal_out_fixed.find(pe);
    if (it != m.internal_out_fixed.end()) fixed = it->second;
    int defs = 0;
    auto jt = internal_classes.find(pe);
    if (jt != internal_classes.end()) defs = static_cast<int>(jt->second.size());
    if (fixed + defs > arch.regs) return false;
  }
  (void)complete;
  return true;
}

}  // namespace

SolveOutcome solve_block(const CdfgFunction& f, const BlockModel& m,
                         const ArchConfig& arch, long long budget) {
  SolveOutcome out;
  const BasicBlock& b = f.blocks[m.block_index];
  auto refs = classify_operands(b);

  // Structural routing: intersect each op's admissible PEs (Fig. 9's
  // conflict is detected here, before any search).
  for (int i = 0; i < m.nops; ++i) {
    std::set<int> allowed;
    for (int pe = 0; pe < arch.num_pes(); ++pe) allowed.insert(pe);
    ValueId emptied_by = kNoValue;
    auto restrict_to = [&](const std::set<int>& s, ValueId who) {
      if (allowed.empty()) return;
      std::set<int> inter;
      std::set_intersection(allowed.begin(), allowed.end(), s.begin(), s.end(),
                            std::inserter(inter, inter.begin()));
      if (inter.empty() && !allowed.empty()) emptied_by = who;
      allowed = std::move(inter);
    };
    auto pin = m.pinned_pe.find(i);
    if (pin != m.pinned_pe.end()) restrict_to({pin->second}, kNoValue);
    for (const auto& r : refs[i]) {
      if (r.kind != OperandRef::Kind::LiveIn) continue;
      for (const auto& li : m.live_ins) {
        if (li.value != r.value || li.pe < 0) continue;
        if (li.rc == RegClass::Internal) {
          restrict_to({li.pe}, li.value);
        } else {
          std::set<int> s{li.pe};
          for (int nb : arch.neighbors(li.pe)) s.insert(nb);
          restrict_to(s, li.value);
        }
      }
    }
    if (allowed.empty()) {
      out.kind = InfeasibleKind::Routing;
      out.culprit_op = i;
      out.culprit_value = emptied_by;
      out.detail = "no PE can reach every operand of op " + std::to_string(i) +
                   " in " + m.label;
      return out;
    }
  }

  {
    std::map<int, int> fixed = m.internal_out_fixed;
    for (const auto& [i, cls] : m.internal_out_defs) {
      auto pin = m.pinned_pe.find(i);
      if (pin != m.pinned_pe.end()) fixed[pin->second] += 1;
    }
    for (const auto& [pe, n] : fixed)
      if (n > arch.regs) {
        out.kind = InfeasibleKind::RegisterOverflow;
        ValueId pick = kNoValue;
        for (const auto& li : m.live_ins)
          if (li.rc == RegClass::Internal && li.pe == pe &&
              (pick == kNoValue || li.value < pick))
            pick = li.value;
        out.culprit_value = pick;
        out.detail =
            "internal registers oversubscribed on PE " + std::to_string(pe);
        return out;
      }
  }

  std::vector<OpPlacement> ops(m.nops);
  std::vector<OpPlacement> best;
  int best_obj = m.horizon + 1;
  long long nodes = budget;
  bool budget_hit = false;

  std::function<void(int)> search = [&](int i) {
    if (nodes < 0) return;
    if (i == m.nops) {
      int obj = ops[m.term_index].t;
      if (obj < best_obj) {
        best_obj = obj;
        best = ops;
      }
      return;
    }
    int lo = 0;
    for (const auto& d : m.deps)
      if (d.to == i && ops[d.from].t >= 0) lo = std::max(lo, ops[d.from].t + 1);
    if (i == m.term_index)
      for (int o = 0; o < m.nops - 1; ++o) lo = std::max(lo, ops[o].t + 1);
    for (const auto& [a, c] : m.mem_order)
      if (c == i && ops[a].t >= 0) lo = std::max(lo, ops[a].t + 1);
    int hi = std::min(m.horizon, best_obj - 1);
    if (i != m.term_index) hi = std::min(hi, best_obj - 2);
    for (int t = lo; t <= hi; ++t) {
      for (int pe = 0; pe < arch.num_pes(); ++pe) {
        if (--nodes < 0) {
          budget_hit = true;
          return;
        }
        ops[i] = OpPlacement{t, pe};
        if (partial_feasible(b, m, arch, ops, false)) search(i + 1);
        ops[i] = OpPlacement{};
        if (nodes < 0) return;
      }
    }
  };
  search(0);

  if (!best.empty()) {
    out.solution = BlockSolution{best, best_obj, !budget_hit};
    return out;
  }
  out.kind = budget_hit ? InfeasibleKind::Budget : InfeasibleKind::Horizon;
  out.detail = budget_hit ? "search budget exhausted in " + m.label
                          : "no assignment within the horizon in " + m.label;
  return out;
}

Diagnostics validate_mapping(const CdfgFunction& f, const std::string& label,
                             const std::vector<OpPlacement>& ops,
                             const ArchConfig& arch, const LiveValueTable& table,
                             const LivenessSets& live) {
  Diagnostics diags;
  auto err = [&](const std::string& eq, const std::string& what) {
    diags.push_back(Diagnostic{eq + ": " + what, label, 0, 0});
  };
  int bi = f.block_index(label);
  if (bi < 0) return {Diagnostic{"unknown block", label, 0, 0}};
  const BasicBlock& b = f.blocks[bi];
  if (ops.size() != b.ops.size())
    return {Diagnostic{"placement count mismatch", label, 0, 0}};
  int n = static_cast<int>(ops.size());
  int t_control = ops[n - 1].t;

  for (int i = 0; i < n; ++i) {
    if (ops[i].pe < 0 || ops[i].pe >= arch.num_pes())
      err("Eq. 8", "op " + std::to_string(i) + " outside the mesh");
    if (ops[i].t < 0 || ops[i].t > t_control)
      err("Eq. 11", "op " + std::to_string(i) + " outside the control window");
  }
  std::set<std::pair<int, int>> used;
  for (int i = 0; i < n; ++i)
    if (!used.insert({ops[i].t, ops[i].pe}).second)
      err("Eq. 8", "two ops share (cycle, PE)");
  std::set<int> store_cycles;
  for (int i = 0; i < n; ++i)
    if (b.ops[i].opcode == Opcode::Store &&
        !store_cycles.insert(ops[i].t).second)
      err("Eq. 14", "two stores share a cycle");

  auto refs = classify_operands(b);
  for (int i = 0; i < n; ++i) {
    for (const auto& r : refs[i]) {
      if (r.kind != OperandRef::Kind::Intra) continue;
      int a = r.producer;
      if (ops[a].t + 1 > ops[i].t)
        err("Eq. 7",
            "op " + std::to_string(i) + " before producer " + std::to_string(a));
      if (r.flag) {
        if (ops[i].pe != ops[a].pe) err("flag", "consumer off its setflags PE");
        for (int o = 0; o < n; ++o) {
          if (o == a || o == i || ops[o].pe != ops[a].pe) continue;
          if (writes_flags(b.ops[o].opcode) && ops[o].t > ops[a].t &&
              ops[o].t < ops[i].t)
            err("flag", "flags clobbered before use");
        }
      } else {
        if (!arch.adjacent_or_same(ops[i].pe, ops[a].pe))
          err("Eq. 9", "op " + std::to_string(i) + " cannot reach producer " +
                           std::to_string(a));
        for (int o = 0; o < n; ++o) {
          if (o == a || ops[o].pe != ops[a].pe) continue;
          if (writes_rout(b.ops[o].opcode) && ops[o].t > ops[a].t &&
              ops[o].t < ops[i].t)
            err("Eq. 10", "value of op " + std::to_string(a) +
                              " clobbered before op " + std::to_string(i));
        }
      }
    }
  }

  std::vector<int> mem_ops;
  for (int i = 0; i < n; ++i)
    if (b.ops[i].opcode == Opcode::Load || b.ops[i].opcode == Opcode::Store)
      mem_ops.push_back(i);
  for (int s : mem_ops) {
    if (b.ops[s].opcode != Opcode::Store) continue;
    for (int mo : mem_ops) {
      if (mo == s) continue;
      if (mo < s && ops[mo].t >= ops[s].t)
        err("Eq. 14", "memory op escapes the store barrier");
      if (mo > s && ops[mo].t <= ops[s].t)
        err("Eq. 14", "memory op overtakes the store barrier");
    }
  }

  std::set<ValueId> incoming = live.in[bi];
  for (const auto& p : b.params) incoming.insert(p.value);
  for (ValueId v : incoming) {
    if (!table.contains(v)) continue;
    RegClass rc = table.reg_class(v);
    int h = table.producer_pe(v);
    std::vector<int> consumers;
    for (int i = 0; i < n; ++i)
      for (const auto& r : refs[i])
        if (r.kind == OperandRef::Kind::LiveIn && r.value == v)
          consumers.push_back(i);
    if (h < 0) {
      if (consumers.empty()) continue;
      h = ops[consumers.front()].pe;  // anchored by its first consumer
    }
    for (int c : consumers) {
      if (rc == RegClass::Internal) {
        if (ops[c].pe != h)
          err("Eq. 6",
              "internal live-in %" + std::to_string(v) + " read off its PE");
      } else if (!arch.adjacent_or_same(ops[c].pe, h)) {
        err("Eq. 4", "external live-in %" + std::to_string(v) +
                         " out of reach of op " + std::to_string(c));
      }
    }
    if (rc == RegClass::External) {
      bool through = live.out[bi].count(v) != 0;
      long long until = through ? kForever : -1;
      if (!through)
        for (int c : consumers) until = std::max<long long>(until, ops[c].t);
      for (int o = 0; o < n; ++o) {
        if (ops[o].pe != h || !writes_rout(b.ops[o].opcode)) continue;
        if (ops[o].t < until)
          err("Eq. 5", "holder of %" + std::to_string(v) +
                           " overwritten before its last use");
      }
    }
  }

  for (ValueId v : live.out[bi]) {
    if (!table.contains(v) || table.reg_class(v) != RegClass::External)
      continue;
    int def = -1;
    for (int i = 0; i < n; ++i)
      if (b.ops[i].result && *b.ops[i].result == v) def = i;
    if (def < 0) continue;
    for (int o = 0; o < n; ++o) {
      if (o == def || ops[o].pe != ops[def].pe) continue;
      if (writes_rout(b.ops[o].opcode) && ops[o].t > ops[def].t)
        err("Eq. 12", "external live-out %" + std::to_string(v) +
                          " overwritten before the block ends");
    }
  }
  {
    std::map<int, std::set<int>> classes_on_pe;
    for (ValueId v : live.out[bi]) {
      if (!table.contains(v) || table.reg_class(v) != RegClass::Internal)
        continue;
      int pe = table.producer_pe(v);
      for (int i = 0; i < n; ++i)
        if (b.ops[i].result && *b.ops[i].result == v) pe = ops[i].pe;
      if (pe >= 0) classes_on_pe[pe].insert(table.class_of(v));
    }
    for (const auto& [pe, classes] : classes_on_pe)
      if (static_cast<int>(classes.size()) > arch.regs)
        err("Eq. 13", "more internal live-outs than registers on PE " +
                          std::to_string(pe));
  }

  for (int i = 0; i < n; ++i) {
    if (!b.ops[i].result || !table.contains(*b.ops[i].result)) continue;
    int pe = table.producer_pe(*b.ops[i].result);
    if (pe >= 0 && ops[i].pe != pe)
      err("Eq. 4", "def of %" + std::to_string(*b.ops[i].result) +
                       " placed off its recorded class PE");
  }
  return diags;
}

namespace {

std::vector<std::string> reverse_postorder(const CdfgFunction& f) {
  std::vector<std::string> post;
  std::set<std::string> seen;
  std::function<void(const std::string&)> dfs = [&](const std::string& label) {
    if (!seen.insert(label).second) return;
    const BasicBlock* b = f.find_block(label);
    for (const auto& s : b->terminator().successors) dfs(s.label);
    post.push_back(label);
  };
  dfs(f.blocks.front().label);
  return {post.rbegin(), post.rend()};
}

void refresh_liveness(MapContext& ctx) { ctx.live = compute_liveness(ctx.f); }

// Defs of classified values fix their class PE; live-ins anchored by their
// first consumer are fixed too.
void record_block(MapContext& ctx, const std::string& label,
                  const BlockSolution& sol) {
  int bi = ctx.f.block_index(label);
  const BasicBlock& b = ctx.f.blocks[bi];
  for (size_t i = 0; i < b.ops.size(); ++i) {
    if (!b.ops[i].result || !ctx.table.contains(*b.ops[i].result)) continue;
    ctx.table.set_producer_pe(*b.ops[i].result, sol.ops[i].pe);
  }
  auto refs = classify_operands(b);
  std::set<ValueId> incoming = ctx.live.in[bi];
  for (const auto& p : b.params) incoming.insert(p.value);
  for (ValueId v : incoming) {
    if (!ctx.table.contains(v) || ctx.table.producer_pe(v) >= 0) continue;
    bool done = false;
    for (size_t i = 0; i < b.ops.size() && !done; ++i)
      for (const auto& r : refs[i])
        if (r.kind == OperandRef::Kind::LiveIn && r.value == v) {
          ctx.table.set_producer_pe(v, sol.ops[i].pe);
          done = true;
          break;
        }
  }
}

}  // namespace

std::optional<EvictionRecord> handle_failure(
    MapContext& ctx, const std::string& label, const SolveOutcome& failure,
    MappingSolution& solution, const std::set<std::string>& solved) {
  BasicBlock snapshot = *ctx.f.find_block(label);
  const int move_cap = ctx.arch.move_budget();

  // Phase 1: hop the unreachable value toward its consumer with identity
  // moves, re-solving after each insertion.
  int moves = 0;
  SolveOutcome last = failure;
  while (last.kind == InfeasibleKind::Routing && moves < move_cap &&
         last.culprit_value != kNoValue && last.culprit_op >= 0) {
    BasicBlock* blk = ctx.f.find_block(label);
    ValueId fresh = ctx.f.next_value_id();
    Operation move;
    move.opcode = Opcode::Add;
    move.result = fresh;
    move.operands = {Operand::val(last.culprit_value), Operand::immediate(0)};
    Operation& consumer = blk->ops[last.culprit_op];
    for (auto& o : consumer.operands)
      if (o.is_value() && o.value == last.culprit_value) o = Operand::val(fresh);
    blk->ops.insert(blk->ops.begin() + last.culprit_op, move);
    ++moves;

    refresh_liveness(ctx);
    BlockModel model = build_model(ctx.f, label, ctx.arch, ctx.table, ctx.live);
    last = solve_block(ctx.f, model, ctx.arch, ctx.solver_budget);
    if (last.solution) {
      solution.blocks[label] = *last.solution;
      solution.moves_inserted += moves;
      return std::nullopt;
    }
  }

  // Phase 2: roll the moves back and split the dataflow through memory.
  *ctx.f.find_block(label) = snapshot;
  refresh_liveness(ctx);

  ValueId culprit = failure.culprit_value;
  auto evictable = [&](ValueId v) {
    if (v == kNoValue || !ctx.table.contains(v)) return false;
    for (const auto& blk : ctx.f.blocks)
      for (const auto& s : blk.terminator().successors)
        for (const auto& a : s.args)
          if (a.is_value() && a.value == v) return false;
    // Loads must not land in already-solved blocks.
    for (const auto& blk : ctx.f.blocks) {
      if (blk.label == label || !solved.count(blk.label)) continue;
      for (const auto& op : blk.ops)
        for (const auto& o : op.operands)
          if (o.is_value() && o.value == v) return false;
    }
    return true;
  };
  if (!evictable(culprit)) {
    culprit = kNoValue;
    BlockModel model = build_model(ctx.f, label, ctx.arch, ctx.table, ctx.live);
    size_t most = 0;
    for (const auto& li : model.live_ins)
      if (li.pe >= 0 && li.consumers.size() >= most && evictable(li.value)) {
        most = li.consumers.size();
        culprit = li.value;
      }
  }
  if (culprit == kNoValue)
    throw std::runtime_error("mapping failed with nothing to evict in " +
                             label + ": " + failure.detail);

  EvictionRecord rec;
  rec.value = culprit;
  rec.slot = ctx.layout.alloc_eviction_slot();

  std::string def_block;
  int def_op = -1;
  for (const auto& blk : ctx.f.blocks) {
    for (size_t i = 0; i < blk.ops.size(); ++i)
      if (blk.ops[i].result && *blk.ops[i].result == culprit) {
        def_block = blk.label;
        def_op = static_cast<int>(i);
      }
    for (const auto& p : blk.params)
      if (p.value == culprit) def_block = blk.label;
  }
  if (def_block.empty())
    throw std::runtime_error("evicted value has no definition");
  rec.store_block = def_block;

  // Replace consumers with loads from the slot, block by block.
  for (auto& blk : ctx.f.blocks) {
    bool uses = false;
    for (const auto& op : blk.ops)
      for (const auto& o : op.operands)
        uses |= o.is_value() && o.value == culprit;
    if (!uses) continue;
    ValueId loaded = ctx.f.next_value_id();
    size_t first_use = blk.ops.size();
    for (size_t i = 0; i < blk.ops.size() && first_use == blk.ops.size(); ++i)
      for (const auto& o : blk.ops[i].operands)
        if (o.is_value() && o.value == culprit) first_use = i;
    Operation load;
    load.opcode = Opcode::Load;
    load.result = loaded;
    load.operands = {Operand::immediate(static_cast<Word>(rec.slot))};
    for (size_t i = first_use; i < blk.ops.size(); ++i)
      for (auto& o : blk.ops[i].operands)
        if (o.is_value() && o.value == culprit) o = Operand::val(loaded);
    blk.ops.insert(blk.ops.begin() + first_use, load);
    rec.load_blocks.push_back(blk.label);
  }

  // One store right after the definition (or at the top of the param's
  // block). Patching a solved producer never re-solves it: the store takes
  // a spare slot or one fresh row.
  {
    BasicBlock* blk = ctx.f.find_block(def_block);
    Operation store;
    store.opcode = Opcode::Store;
    store.operands = {Operand::val(culprit),
                      Operand::immediate(static_cast<Word>(rec.slot))};
    size_t pos = def_op >= 0 ? static_cast<size_t>(def_op) + 1 : 0;
    blk->ops.insert(blk->ops.begin() + pos, store);

    if (solved.count(def_block)) {
      BlockSolution& ps = solution.blocks.at(def_block);
      int t_def = def_op >= 0 ? ps.ops[def_op].t : -1;
      int t_mem = t_def;
      for (size_t i = 0; i < ps.ops.size(); ++i) {
        size_t ir = i < pos ? i : i + 1;
        Opcode oc = blk->ops[ir].opcode;
        if (oc == Opcode::Load || oc == Opcode::Store)
          t_mem = std::max(t_mem, ps.ops[i].t);
      }
      int h = ctx.table.producer_pe(culprit);
      if (h < 0 && def_op >= 0) h = ps.ops[def_op].pe;
      bool internal = ctx.table.reg_class(culprit) == RegClass::Internal;
      std::vector<int> near{h};
      if (!internal)
        for (int nb : ctx.arch.neighbors(h)) near.push_back(nb);
      OpPlacement where{-1, -1};
      for (int t = t_mem + 1; t < ps.t_control && where.t < 0; ++t)
        for (int pe : near) {
          bool free = true;
          for (const auto& p : ps.ops) free &= !(p.t == t && p.pe == pe);
          if (free) {
            where = OpPlacement{t, pe};
            break;
          }
        }
      if (where.t < 0) {
        // Push the control op one row down and store in the freed row.
        ps.ops.back().t += 1;
        ps.t_control += 1;
        for (int pe : near) {
          bool free = true;
          for (const auto& p : ps.ops)
            free &= !(p.t == ps.t_control - 1 && p.pe == pe);
          if (free) {
            where = OpPlacement{ps.t_control - 1, pe};
            break;
          }
        }
      }
      if (where.t < 0)
        throw std::runtime_error("no room to patch a store into " + def_block);
      ps.ops.insert(ps.ops.begin() + pos, where);
    }
  }

  refresh_liveness(ctx);
  return rec;
}

MappingSolution schedule_cdfg(MapContext& ctx) {
  MappingSolution solution;
  std::set<std::string> solved;
  refresh_liveness(ctx);

  for (const auto& seed : ctx.seeds) {
    const BasicBlock* b = ctx.f.find_block(seed.label);
    if (!b) throw std::runtime_error("seed names unknown block " + seed.label);
    if (seed.placement.size() != b->ops.size())
      throw std::runtime_error("seed shape mismatch for " + seed.label);
    BlockSolution sol;
    sol.ops = seed.placement;
    sol.t_control = seed.placement.back().t;
    sol.proven_optimal = true;
    record_block(ctx, seed.label, sol);
    Diagnostics diags = validate_mapping(ctx.f, seed.label, sol.ops, ctx.arch,
                                         ctx.table, ctx.live);
    if (!diags.empty())
      throw std::runtime_error("seeded block fails validation: " + seed.label +
                               "\n" + diagnostics_to_string(diags));
    solution.blocks[seed.label] = sol;
    solved.insert(seed.label);
  }

  for (const std::string& label : reverse_postorder(ctx.f)) {
    if (solved.count(label)) continue;
    int guard = 0;
    while (!solution.blocks.count(label)) {
      if (++guard > 64)
        throw std::runtime_error("failure handling loops on block " + label);
      BlockModel model = build_model(ctx.f, label, ctx.arch, ctx.table, ctx.live);
      SolveOutcome out = solve_block(ctx.f, model, ctx.arch, ctx.solver_budget);
      if (out.solution) {
        solution.blocks[label] = *out.solution;
        break;
      }
      auto rec = handle_failure(ctx, label, out, solution, solved);
      if (rec) solution.evictions.push_back(*rec);
    }
    record_block(ctx, label, solution.blocks.at(label));
    Diagnostics diags =
        validate_mapping(ctx.f, label, solution.blocks.at(label).ops, ctx.arch,
                         ctx.table, ctx.live);
    if (!diags.empty())
      throw std::runtime_error("solver output fails validation on " + label +
                               ":\n" + diagnostics_to_string(diags));
    solved.insert(label);
  }
  return solution;
}

}  // namespace cgraflow

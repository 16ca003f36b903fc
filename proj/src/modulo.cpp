#include "cgraflow/modulo.hpp"

#include <algorithm>
#include <cassert>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cgraflow {

namespace {

struct Edge {
  int from = -1;
  int to = -1;
  int dist = 0;
  enum class Kind { Data, Flag, Mem } kind = Kind::Data;
};

// Structural view of a self-looping block: carried args, dependence edges
// with iteration distances, live-in uses.
struct LoopInfo {
  int block_index = -1;
  const BasicBlock* block = nullptr;
  int term_index = -1;
  int setflags_index = -1;  // flag producer of the loop branch
  const SuccessorRef* self_edge = nullptr;
  const SuccessorRef* exit_edge = nullptr;
  bool taken_is_self = false;
  std::map<ValueId, int> def_op;
  std::map<ValueId, int> param_index;
  std::vector<Edge> edges;
  std::map<ValueId, std::vector<int>> live_in_uses;
  std::string error;

  struct ChaseResult {
    int hops = 0;
    int op = -1;              // in-loop producer
    ValueId external = kNoValue;
    bool is_imm = false;
    bool rotation = false;
  };
  // Follow a carried argument through params to its in-loop producer.
  ChaseResult chase(Operand x) const {
    ChaseResult r;
    std::set<int> seen;
    while (x.is_value() && param_index.count(x.value)) {
      int j = param_index.at(x.value);
      if (!seen.insert(j).second) {
        r.rotation = true;
        return r;
      }
      x = self_edge->args[j];
      ++r.hops;
    }
    if (x.is_imm()) {
      r.is_imm = true;
      return r;
    }
    auto it = def_op.find(x.value);
    if (it != def_op.end())
      r.op = it->second;
    else
      r.external = x.value;
    return r;
  }
};

bool has_flag_operand(const Operation& op) {
  return op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
         is_flag_branch(op.opcode);
}

LoopInfo analyze_loop(const CdfgFunction& f, const std::string& label) {
  LoopInfo info;
  info.block_index = f.block_index(label);
  if (info.block_index < 0) {
    info.error = "no such block " + label;
    return info;
  }
  info.block = &f.blocks[info.block_index];
  const BasicBlock& b = *info.block;
  const Operation& term = b.terminator();
  if (!is_flag_branch(term.opcode)) {
    info.error = "loop terminator must be a predicate branch";
    return info;
  }
  info.term_index = static_cast<int>(b.ops.size()) - 1;
  if (term.successors[0].label == label) {
    info.self_edge = &term.successors[0];
    info.exit_edge = &term.successors[1];
    info.taken_is_self = true;
  } else if (term.successors[1].label == label) {
    info.self_edge = &term.successors[1];
    info.exit_edge = &term.successors[0];
  } else {
    info.error = "block does not loop on itself";
    return info;
  }
  if (info.exit_edge->label == label) {
    info.error = "both branch targets loop";
    return info;
  }
  for (size_t i = 0; i + 1 < b.ops.size(); ++i)
    if (is_terminator(b.ops[i].opcode)) {
      info.error = "interior control op";
      return info;
    }
  for (size_t j = 0; j < b.params.size(); ++j)
    info.param_index[b.params[j].value] = static_cast<int>(j);
  for (size_t i = 0; i < b.ops.size(); ++i)
    if (b.ops[i].result) info.def_op[*b.ops[i].result] = static_cast<int>(i);

  for (size_t i = 0; i < b.ops.size(); ++i) {
    const Operation& op = b.ops[i];
    size_t first = 0;
    if (has_flag_operand(op)) {
      const Operand& flag = op.operands[0];
      auto it =
          flag.is_value() ? info.def_op.find(flag.value) : info.def_op.end();
      if (it == info.def_op.end()) {
        info.error = "flag operand lacks a same-block setflags";
        return info;
      }
      info.edges.push_back(Edge{it->second, int(i), 0, Edge::Kind::Flag});
      if (int(i) == info.term_index) info.setflags_index = it->second;
      first = 1;
    }
    for (size_t k = first; k < op.operands.size(); ++k) {
      const Operand& x = op.operands[k];
      if (x.is_imm()) continue;
      auto def = info.def_op.find(x.value);
      if (def != info.def_op.end()) {
        info.edges.push_back(Edge{def->second, int(i), 0, Edge::Kind::Data});
        continue;
      }
      if (info.param_index.count(x.value)) {
        auto r = info.chase(x);
        if (r.rotation) {
          info.error = "carried block arguments rotate without a producer";
          return info;
        }
        if (r.is_imm) {
          info.error = "carried block argument is an immediate";
          return info;
        }
        if (r.op >= 0)
          info.edges.push_back(Edge{r.op, int(i), r.hops, Edge::Kind::Data});
        else
          info.live_in_uses[r.external].push_back(int(i));
        continue;
      }
      info.live_in_uses[x.value].push_back(int(i));
    }
  }
  if (info.setflags_index < 0) {
    info.error = "loop branch has no setflags producer";
    return info;
  }

  // Memory ordering: a store is a barrier within its iteration and against
  // every memory op of the next one (no aliasing analysis).
  std::vector<int> mem_ops;
  for (size_t i = 0; i < b.ops.size(); ++i)
    if (b.ops[i].opcode == Opcode::Load || b.ops[i].opcode == Opcode::Store)
      mem_ops.push_back(static_cast<int>(i));
  for (int s : mem_ops) {
    if (b.ops[s].opcode != Opcode::Store) continue;
    for (int m : mem_ops) {
      if (m == s) continue;
      if (m < s)
        info.edges.push_back(Edge{m, s, 0, Edge::Kind::Mem});
      else
        info.edges.push_back(Edge{s, m, 0, Edge::Kind::Mem});
    }
    for (int m : mem_ops) info.edges.push_back(Edge{s, m, 1, Edge::Kind::Mem});
  }
  return info;
}

int stage_of(int t, int ii) { return t / ii; }

// Shared validation for complete (checker) and partial (scheduler) states.
Diagnostics check_placements(const LoopInfo& info, int ii,
                             const std::vector<OpPlacement>& places,
                             const ArchConfig& arch, bool complete,
                             ScheduleService* service) {
  Diagnostics diags;
  auto err = [&](const std::string& m) {
    diags.push_back(Diagnostic{m, info.block ? info.block->label : "", 0, 0});
  };
  const BasicBlock& b = *info.block;
  int npes = arch.num_pes();
  auto placed = [&](int i) { return places[i].t >= 0; };

  if (ii < 2) err("II must be at least 2 (setflags and branch rows)");

  for (size_t i = 0; i < places.size(); ++i) {
    if (!placed(int(i))) {
      if (complete) err("op " + std::to_string(i) + " is unplaced");
      continue;
    }
    if (places[i].pe < 0 || places[i].pe >= npes)
      err("op " + std::to_string(i) + " placed outside the mesh");
  }
  if (!diags.empty()) return diags;

  std::map<std::pair<int, int>, int> slot;
  for (size_t i = 0; i < places.size(); ++i) {
    if (!placed(int(i))) continue;
    auto key = std::make_pair(places[i].t % ii, places[i].pe);
    auto [it, fresh] = slot.emplace(key, int(i));
    if (!fresh)
      err("modulo resource conflict: ops " + std::to_string(it->second) +
          " and " + std::to_string(i) + " share (t mod II, PE)");
  }

  std::set<int> store_rows;
  for (size_t i = 0; i < places.size(); ++i) {
    if (!placed(int(i)) || b.ops[i].opcode != Opcode::Store) continue;
    if (!store_rows.insert(places[i].t % ii).second)
      err("two stores share a row mod II");
  }

  if (placed(info.term_index) && places[info.term_index].t != ii - 1)
    err("loop branch must sit at cycle II-1");
  if (placed(info.setflags_index)) {
    if (places[info.setflags_index].t != ii - 2)
      err("loop setflags must sit at cycle II-2");
    if (placed(info.term_index) &&
        places[info.setflags_index].pe != places[info.term_index].pe)
      err("loop branch must issue on its setflags PE");
  }

  auto writer_between = [&](int pe, int t_from, int gap, int skip_a, int skip_b,
                            bool flags) {
    for (size_t o = 0; o < places.size(); ++o) {
      if (!placed(int(o)) || int(o) == skip_a || int(o) == skip_b) continue;
      if (places[o].pe != pe) continue;
      if (flags ? !writes_flags(b.ops[o].opcode) : !writes_rout(b.ops[o].opcode))
        continue;
      int off = ((places[o].t - t_from) % ii + ii) % ii;
      if (off >= 1 && off <= std::min(gap, ii) - 1) return true;
    }
    return false;
  };

  for (const Edge& e : info.edges) {
    if (!placed(e.from) || !placed(e.to)) continue;
    int g = places[e.to].t + e.dist * ii - places[e.from].t;
    std::string tag = "edge " + std::to_string(e.from) + "->" +
                      std::to_string(e.to) + "/" + std::to_string(e.dist);
    if (g < 1) {
      err("dependence violated: " + tag);
      continue;
    }
    if (e.kind == Edge::Kind::Mem) continue;
    if (g > ii) {
      err("value of " + tag + " outlives one interval (gap " +
          std::to_string(g) + " > II)");
      continue;
    }
    if (e.kind == Edge::Kind::Flag) {
      if (places[e.to].pe != places[e.from].pe)
        err("flag consumer off its setflags PE: " + tag);
      if (e.to == info.term_index && g != 1)
        err("loop branch must follow its setflags immediately");
      if (writer_between(places[e.from].pe, places[e.from].t, g, e.from, e.to,
                         true))
        err("flags clobbered before use: " + tag);
    }
  }

  // Per-value storage: same-beat consumers read Rout; later-beat consumers
  // read the producer's surviving Rout or a slot on the producer's PE.
  std::map<int, int> slot_demand;
  for (size_t a = 0; a < places.size(); ++a) {
    if (!b.ops[a].result || !placed(int(a))) continue;
    bool any_cross = false, rout_ok = true, slot_ok = true;
    for (const Edge& e : info.edges) {
      if (e.kind != Edge::Kind::Data || e.from != int(a)) continue;
      if (!placed(e.to)) continue;
      int g = places[e.to].t + e.dist * ii - places[e.from].t;
      if (g < 1 || g > ii) continue;  // reported above
      int delta = stage_of(places[e.to].t, ii) + e.dist -
                  stage_of(places[e.from].t, ii);
      bool reach = arch.adjacent_or_same(places[e.to].pe, places[e.from].pe);
      bool survives = !writer_between(places[e.from].pe, places[e.from].t, g,
                                      int(a), e.to, false);
      if (delta == 0) {
        if (!reach)
          err("consumer " + std::to_string(e.to) + " cannot reach producer " +
              std::to_string(a));
        else if (!survives)
          err("Rout of op " + std::to_string(a) + " clobbered before op " +
              std::to_string(e.to));
      } else {
        any_cross = true;
        rout_ok = rout_ok && reach && survives;
        slot_ok = slot_ok && places[e.to].pe == places[e.from].pe;
      }
    }
    if (!any_cross) continue;
    if (rout_ok) {
      if (service && complete)
        service->carried[*b.ops[a].result] = RegClass::External;
    } else if (slot_ok) {
      slot_demand[places[a].pe] += 1;
      if (service && complete)
        service->carried[*b.ops[a].result] = RegClass::Internal;
    } else {
      err("carried value of op " + std::to_string(a) +
          " is neither Rout-reachable nor PE-local");
    }
  }

  // Loop-invariant live-ins stay in one PE's register file.
  for (const auto& [v, users] : info.live_in_uses) {
    int home = -1;
    bool bad = false;
    for (int u : users) {
      if (!placed(u)) continue;
      if (home < 0) home = places[u].pe;
      if (places[u].pe != home) bad = true;
    }
    if (bad) err("live-in %" + std::to_string(v) + " consumed on several PEs");
    if (home >= 0) {
      slot_demand[home] += 1;
      if (service && complete) service->live_in_home[v] = home;
    }
  }
  for (const auto& [pe, n] : slot_demand)
    if (n > arch.regs)
      err("register overflow on PE " + std::to_string(pe) + ": " +
          std::to_string(n) + " slots needed");

  return diags;
}

Opcode negate_branch(Opcode op) {
  switch (op) {
    case Opcode::Bge: return Opcode::Blt;
    case Opcode::Blt: return Opcode::Bge;
    case Opcode::Beq: return Opcode::Bne;
    case Opcode::Bne: return Opcode::Beq;
    default: return op;
  }
}

}  // namespace

Diagnostics check_schedule(const CdfgFunction& f, const ModuloSchedule& ms,
                           const ArchConfig& arch, ScheduleService* service) {
  LoopInfo info = analyze_loop(f, ms.block);
  if (!info.error.empty()) return {Diagnostic{info.error, ms.block, 0, 0}};
  if (ms.placements.size() != info.block->ops.size())
    return {
        Diagnostic{"placement count does not match the block", ms.block, 0, 0}};
  Diagnostics diags;
  int max_t = -1;
  for (const auto& p : ms.placements) max_t = std::max(max_t, p.t);
  if (ms.length != max_t + 1)
    diags.push_back(
        Diagnostic{"stated L does not match max cycle + 1", ms.block, 0, 0});
  if (ms.ii > ms.length)
    diags.push_back(Diagnostic{"II exceeds L", ms.block, 0, 0});
  Diagnostics more =
      check_placements(info, ms.ii, ms.placements, arch, true, service);
  diags.insert(diags.end(), more.begin(), more.end());
  return diags;
}

int res_mii(const CdfgFunction& f, const std::string& block,
            const ArchConfig& arch) {
  const BasicBlock* b = f.find_block(block);
  int n = b ? static_cast<int>(b->ops.size()) : 0;
  return (n + arch.num_pes() - 1) / arch.num_pes();
}

int rec_mii(const CdfgFunction& f, const std::string& block) {
  LoopInfo info = analyze_loop(f, block);
  if (!info.error.empty()) return 1;
  int n = static_cast<int>(info.block->ops.size());
  // Smallest II admitting no positive cycle under weights 1 - II*dist.
  for (int ii = 1; ii <= n + 1; ++ii) {
    std::vector<long long> dist(n, 0);
    bool relaxed = true;
    int rounds = 0;
    while (relaxed && rounds <= n + 1) {
      relaxed = false;
      ++rounds;
      for (const Edge& e : info.edges) {
        long long w = 1 - static_cast<long long>(ii) * e.dist;
        if (dist[e.from] + w > dist[e.to]) {
          dist[e.to] = dist[e.from] + w;
          relaxed = true;
        }
      }
    }
    if (!relaxed) return ii;
  }
  return n + 1;
}

ScheduleAttempt schedule_loop(const CdfgFunction& f, const std::string& block,
                              const ArchConfig& arch, int ii_max) {
  ScheduleAttempt attempt;
  LoopInfo info = analyze_loop(f, block);
  if (!info.error.empty()) {
    attempt.reason = info.error;
    return attempt;
  }
  const int n = static_cast<int>(info.block->ops.size());
  attempt.res_mii = res_mii(f, block, arch);
  attempt.rec_mii = rec_mii(f, block);

  // Pinned control ops first, then dependence-topological order.
  std::vector<int> order{info.term_index, info.setflags_index};
  {
    std::vector<int> indeg(n, 0);
    for (const Edge& e : info.edges)
      if (e.dist == 0 && e.from != e.to) ++indeg[e.to];
    std::vector<bool> done(n, false);
    done[info.term_index] = done[info.setflags_index] = true;
    while (static_cast<int>(order.size()) < n) {
      int pick = -1;
      for (int i = 0; i < n && pick < 0; ++i)
        if (!done[i] && indeg[i] <= 0) pick = i;
      for (int i = 0; i < n && pick < 0; ++i)
        if (!done[i]) pick = i;
      done[pick] = true;
      order.push_back(pick);
      for (const Edge& e : info.edges)
        if (e.dist == 0 && e.from == pick) --indeg[e.to];
    }
  }

  int start_ii = std::max({attempt.res_mii, attempt.rec_mii, 2});
  for (int ii = start_ii; ii <= ii_max; ++ii) {
    std::vector<OpPlacement> places(n);
    long long budget = 150000;
    const int horizon = n + 2 * ii + 4;

    std::function<bool(size_t)> place = [&](size_t k) -> bool {
      if (k == order.size()) return true;
      int op = order[k];
      int lo = 0, hi = horizon;
      if (op == info.term_index) lo = hi = ii - 1;
      if (op == info.setflags_index) lo = hi = ii - 2;
      for (const Edge& e : info.edges) {
        if (e.to == op && places[e.from].t >= 0) {
          lo = std::max(lo, places[e.from].t + 1 - e.dist * ii);
          if (e.kind != Edge::Kind::Mem)
            hi = std::min(hi, places[e.from].t + ii - e.dist * ii);
        }
        if (e.from == op && places[e.to].t >= 0) {
          hi = std::min(hi, places[e.to].t + e.dist * ii - 1);
          if (e.kind != Edge::Kind::Mem)
            lo = std::max(lo, places[e.to].t + e.dist * ii - ii);
        }
      }
      for (int t = std::max(lo, 0); t <= hi; ++t) {
        for (int pe = 0; pe < arch.num_pes(); ++pe) {
          if (--budget < 0) return false;
          places[op] = OpPlacement{t, pe};
          if (check_placements(info, ii, places, arch, false, nullptr)
                  .empty() &&
              place(k + 1))
            return true;
          places[op] = OpPlacement{};
        }
      }
      return false;
    };

    if (place(0)) {
      ModuloSchedule ms;
      ms.block = block;
      ms.ii = ii;
      ms.placements = places;
      int max_t = 0;
      for (const auto& p : places) max_t = std::max(max_t, p.t);
      ms.length = max_t + 1;
      if (check_schedule(f, ms, arch).empty()) {
        attempt.schedule = std::move(ms);
        return attempt;
      }
    }
  }
  attempt.reason = "no feasible schedule up to II=" + std::to_string(ii_max);
  return attempt;
}

ModuloSchedule import_schedule(const std::string& text, const CdfgFunction& f,
                               const ArchConfig& arch) {
  ModuloSchedule ms;
  std::istringstream is(text);
  std::string line;
  bool header = false;
  std::map<int, OpPlacement> rows;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto cut = line.find(';');
    if (cut != std::string::npos) line = line.substr(0, cut);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    auto require = [&](bool ok, const std::string& what) {
      if (!ok)
        throw std::runtime_error("schedule line " + std::to_string(lineno) +
                                 ": " + what);
    };
    if (!header) {
      require(tok.rfind("II=", 0) == 0, "expected II=<n>");
      ms.ii = std::stoi(tok.substr(3));
      require(bool(ls >> tok) && tok.rfind("L=", 0) == 0, "expected L=<n>");
      ms.length = std::stoi(tok.substr(2));
      require(bool(ls >> tok) && tok.rfind("block=", 0) == 0,
              "expected block=<label>");
      ms.block = tok.substr(6);
      header = true;
      continue;
    }
    int opid = std::stoi(tok);
    OpPlacement p;
    require(bool(ls >> tok) && tok.rfind("t=", 0) == 0, "expected t=<cycle>");
    p.t = std::stoi(tok.substr(2));
    require(bool(ls >> tok) && tok.rfind("pe=", 0) == 0, "expected pe=<index>");
    p.pe = std::stoi(tok.substr(3));
    require(rows.emplace(opid, p).second, "duplicate opid");
  }
  if (!header) throw std::runtime_error("schedule file has no header");
  const BasicBlock* b = f.find_block(ms.block);
  if (!b) throw std::runtime_error("schedule names unknown block " + ms.block);
  ms.placements.assign(b->ops.size(), OpPlacement{});
  for (const auto& [opid, p] : rows) {
    if (opid < 0 || opid >= static_cast<int>(b->ops.size()))
      throw std::runtime_error("opid " + std::to_string(opid) + " out of range");
    ms.placements[opid] = p;
  }
  Diagnostics diags = check_schedule(f, ms, arch);
  if (!diags.empty())
    throw std::runtime_error("imported schedule rejected:\n" +
                             diagnostics_to_string(diags));
  return ms;
}

std::string print_schedule(const ModuloSchedule& ms) {
  std::ostringstream os;
  os << "II=" << ms.ii << " L=" << ms.length << " block=" << ms.block << "\n";
  for (size_t i = 0; i < ms.placements.size(); ++i)
    os << i << " t=" << ms.placements[i].t << " pe=" << ms.placements[i].pe
       << "\n";
  return os.str();
}

std::vector<std::string> find_pipelinable_loops(const CdfgFunction& f) {
  std::vector<std::string> out;
  for (const auto& b : f.blocks) {
    const Operation& term = b.terminator();
    if (!is_flag_branch(term.opcode)) continue;
    bool self = term.successors[0].label == b.label ||
                term.successors[1].label == b.label;
    bool both = term.successors[0].label == term.successors[1].label;
    if (!self || both) continue;
    bool interior_control = false;
    for (size_t i = 0; i + 1 < b.ops.size(); ++i)
      interior_control |= is_terminator(b.ops[i].opcode);
    if (!interior_control) out.push_back(b.label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CFG adaptation (prologue stages, self-iterating kernel, epilogues)
// ---------------------------------------------------------------------------

namespace {

struct AdaptBuilder {
  LoopInfo info;
  BasicBlock loop;          // pre-adaptation snapshot
  SuccessorRef self_edge;
  SuccessorRef exit_edge;
  const ModuloSchedule* ms = nullptr;
  int S = 1, II = 1;
  ValueId next_id = 0;

  std::map<std::pair<int, int>, Operand> sval;  // (instance, op) -> copy
  std::map<std::pair<int, int>, Operand> kval;  // (window, op) -> kernel copy
  std::vector<ValueId> st1_params;

  struct KParam {
    ValueId id;
    int op;
    int delta;
    Operand init;
  };
  std::vector<KParam> kparams;

  int stage(int op) const { return ms->placements[op].t / II; }
  ValueId fresh() { return next_id++; }

  Operand rstat(Operand x, int inst) {
    while (x.is_value() && info.param_index.count(x.value)) {
      int j = info.param_index.at(x.value);
      if (inst == 0) return Operand::val(st1_params[j]);
      x = self_edge.args[j];
      --inst;
    }
    if (x.is_imm()) return x;
    auto def = info.def_op.find(x.value);
    if (def == info.def_op.end()) return x;  // live-in, reaches by dominance
    return sval.at({inst, def->second});
  }

  Operand u_param(int op, int delta, const Operand& init) {
    for (const auto& kp : kparams)
      if (kp.op == op && kp.delta == delta && kp.init == init)
        return Operand::val(kp.id);
    if (delta > 1) {
      int inst = (S - 1) - (delta - 1) - stage(op);
      u_param(op, delta - 1, sval.at({inst, op}));
    }
    KParam kp{fresh(), op, delta, init};
    kparams.push_back(kp);
    return Operand::val(kp.id);
  }

  Operand r_kern(Operand x, int w) {
    Operand orig = x;
    int hops = 0;
    while (x.is_value() && info.param_index.count(x.value)) {
      x = self_edge.args[info.param_index.at(x.value)];
      ++hops;
    }
    if (x.is_imm()) return x;
    auto def = info.def_op.find(x.value);
    if (def == info.def_op.end()) return x;  // live-in
    int a = def->second;
    int delta = w + hops - stage(a);
    if (delta == 0) return kval.at({stage(a), a});
    return u_param(a, delta, rstat(orig, (S - 1) - w));
  }
};

}  // namespace

AdaptResult adapt_cfg(CdfgFunction& f, const ModuloSchedule& ms,
                      const ArchConfig& arch) {
  AdaptResult result;
  ScheduleService service;
  Diagnostics diags = check_schedule(f, ms, arch, &service);
  if (!diags.empty())
    throw std::runtime_error("adapt_cfg needs a valid schedule:\n" +
                             diagnostics_to_string(diags));

  AdaptBuilder bld;
  bld.ms = &ms;
  bld.II = ms.ii;
  bld.S = (ms.length + ms.ii - 1) / ms.ii;
  bld.next_id = f.next_value_id();
  const int S = bld.S, II = bld.II;
  result.stages = S;

  auto pin_value = [&](ValueId v, int pe, RegClass rc) {
    result.pins.push_back(ValuePin{v, pe, rc});
  };
  auto rc_of_op = [&](int op, const BasicBlock& blk) {
    if (!blk.ops[op].result) return RegClass::Internal;
    auto it = service.carried.find(*blk.ops[op].result);
    // Values that only leave through the exit path keep a slot: correct
    // regardless of what the drain blocks do to the producer's Rout.
    return it == service.carried.end() ? RegClass::Internal : it->second;
  };

  if (S == 1) {
    bld.info = analyze_loop(f, ms.block);
    BlockSeed seed;
    seed.label = ms.block;
    seed.placement = ms.placements;
    result.seeds.push_back(seed);
    result.stage_blocks.push_back(ms.block);
    const BasicBlock& blk = *bld.info.block;
    for (size_t i = 0; i < blk.ops.size(); ++i)
      if (blk.ops[i].result)
        pin_value(*blk.ops[i].result, ms.placements[i].pe,
                  rc_of_op(int(i), blk));
    for (size_t j = 0; j < blk.params.size(); ++j) {
      auto r = bld.info.chase(Operand::val(blk.params[j].value));
      if (r.op >= 0)
        pin_value(blk.params[j].value, ms.placements[r.op].pe,
                  rc_of_op(r.op, blk));
      else if (r.external != kNoValue)
        pin_value(blk.params[j].value, service.live_in_home.at(r.external),
                  RegClass::Internal);
    }
    for (const auto& [v, home] : service.live_in_home)
      pin_value(v, home, RegClass::Internal);
    return result;
  }

  // Loop values consumed past the loop must leave through the exit edge.
  // Direct SSA uses are only legal when the exit block has the loop as its
  // single predecessor; reroute them through fresh exit params.
  {
    LoopInfo pre = analyze_loop(f, ms.block);
    std::set<ValueId> loop_defs;
    for (const auto& [v, op] : pre.def_op) loop_defs.insert(v);
    const std::string exit_label_orig = pre.exit_edge->label;
    std::map<ValueId, ValueId> rerouted;
    ValueId reroute_next = f.next_value_id();
    for (auto& blk : f.blocks) {
      if (blk.label == ms.block) continue;
      for (auto& op : blk.ops) {
        auto fix = [&](Operand& o) {
          if (!o.is_value() || !loop_defs.count(o.value)) return;
          auto it = rerouted.find(o.value);
          if (it == rerouted.end()) {
            ValueId param = reroute_next++;
            f.find_block(exit_label_orig)
                ->params.push_back(BlockParam{param});
            BasicBlock* lb = f.find_block(ms.block);
            for (auto& s : lb->ops.back().successors)
              if (s.label == exit_label_orig)
                s.args.push_back(Operand::val(o.value));
            it = rerouted.emplace(o.value, param).first;
          }
          o = Operand::val(it->second);
        };
        for (auto& o : op.operands) fix(o);
        for (auto& s : op.successors)
          for (auto& a : s.args) fix(a);
      }
    }
    if (!rerouted.empty()) bld.next_id = f.next_value_id();
  }

  bld.info = analyze_loop(f, ms.block);
  if (!bld.info.error.empty())
    throw std::runtime_error("adapt_cfg: " + bld.info.error);
  bld.loop = *bld.info.block;
  bld.self_edge = *bld.info.self_edge;
  bld.exit_edge = *bld.info.exit_edge;
  const BasicBlock& loop = bld.loop;
  for (const auto& p : loop.params) bld.st1_params.push_back(p.value);

  const std::string base = loop.label;
  auto stage_label = [&](int l) {
    if (l == 1) return base;
    if (l == S) return base + "_k";
    return base + "_s" + std::to_string(l);
  };
  auto exit_label = [&](int l) { return base + "_x" + std::to_string(l); };

  const Opcode cont_op = bld.info.taken_is_self
                             ? loop.terminator().opcode
                             : negate_branch(loop.terminator().opcode);
  const int term_index = bld.info.term_index;

  struct CopyRef {
    int op;
    int inst;  // fill: iteration instance; kernel: window; exit: window j
    int row;
    int pe;
  };
  auto by_row_term_last = [&](const CopyRef& a, const CopyRef& b) {
    bool ta = a.op == term_index, tb = b.op == term_index;
    if (ta != tb) return tb;
    if (a.row != b.row) return a.row < b.row;
    return a.pe < b.pe;
  };

  std::vector<BasicBlock> fill_blocks;
  std::vector<BlockSeed> fill_seeds;

  for (int l = 1; l <= S - 1; ++l) {
    BasicBlock blk;
    blk.label = stage_label(l);
    if (l == 1)
      for (ValueId p : bld.st1_params) blk.params.push_back(BlockParam{p});
    std::vector<CopyRef> copies;
    for (int w = 0; w < l; ++w) {
      int inst = l - 1 - w;
      for (size_t op = 0; op < loop.ops.size(); ++op) {
        if (bld.stage(int(op)) != w) continue;
        copies.push_back(CopyRef{int(op), inst, ms.placements[op].t - w * II,
                                 ms.placements[op].pe});
      }
    }
    std::sort(copies.begin(), copies.end(), by_row_term_last);
    BlockSeed seed;
    seed.label = blk.label;
    for (const CopyRef& c : copies) {
      const Operation& src = loop.ops[c.op];
      if (c.op == term_index) {
        Operation br;
        br.opcode = negate_branch(cont_op);
        br.operands = {bld.rstat(src.operands[0], c.inst)};
        br.successors = {SuccessorRef{exit_label(l), {}},
                         SuccessorRef{stage_label(l + 1), {}}};
        blk.ops.push_back(std::move(br));
      } else {
        Operation copy;
        copy.opcode = src.opcode;
        for (const auto& x : src.operands)
          copy.operands.push_back(bld.rstat(x, c.inst));
        if (src.result) {
          copy.result = bld.fresh();
          bld.sval[{c.inst, c.op}] = Operand::val(*copy.result);
          pin_value(*copy.result, c.pe, rc_of_op(c.op, loop));
        }
        blk.ops.push_back(std::move(copy));
      }
      seed.placement.push_back(OpPlacement{c.row, c.pe});
    }
    fill_blocks.push_back(std::move(blk));
    fill_seeds.push_back(std::move(seed));
  }

  // Kernel: every window folded onto II rows.
  BasicBlock kernel;
  kernel.label = stage_label(S);
  BlockSeed kseed;
  kseed.label = kernel.label;
  Operation kbranch;
  {
    std::vector<CopyRef> copies;
    for (size_t op = 0; op < loop.ops.size(); ++op)
      copies.push_back(CopyRef{int(op), bld.stage(int(op)),
                               ms.placements[op].t % II, ms.placements[op].pe});
    std::sort(copies.begin(), copies.end(), by_row_term_last);
    for (const CopyRef& c : copies) {
      const Operation& src = loop.ops[c.op];
      if (c.op == term_index) {
        kbranch.opcode = cont_op;
        kbranch.operands = {bld.r_kern(src.operands[0], 0)};
        kseed.placement.push_back(OpPlacement{c.row, c.pe});
        continue;
      }
      Operation copy;
      copy.opcode = src.opcode;
      for (const auto& x : src.operands)
        copy.operands.push_back(bld.r_kern(x, c.inst));
      if (src.result) {
        copy.result = bld.fresh();
        bld.kval[{c.inst, c.op}] = Operand::val(*copy.result);
        pin_value(*copy.result, c.pe, rc_of_op(c.op, loop));
      }
      kernel.ops.push_back(std::move(copy));
      kseed.placement.push_back(OpPlacement{c.row, c.pe});
    }
  }

  // Epilogues drain the in-flight iterations. The last fill stage and the
  // kernel share one epilogue, fed through params; earlier epilogues have a
  // single predecessor and use the fill names directly.
  struct EpParam {
    ValueId id;
    Operand from_fill;
    Operand from_kernel;
  };
  std::vector<EpParam> ep_params;
  auto ep_boundary = [&](Operand x, int j) -> Operand {
    Operand from_fill = bld.rstat(x, (S - 1) - 1 - j);
    Operand from_kernel = bld.r_kern(x, j);
    if (from_fill == from_kernel) return from_fill;  // live-in or immediate
    for (const auto& p : ep_params)
      if (p.from_fill == from_fill && p.from_kernel == from_kernel)
        return Operand::val(p.id);
    EpParam p{bld.fresh(), from_fill, from_kernel};
    ep_params.push_back(p);
    return Operand::val(p.id);
  };

  std::vector<BasicBlock> exit_blocks;
  std::vector<BlockSeed> exit_seeds;
  for (int l = S - 1; l >= 1; --l) {
    const bool shared = (l == S - 1);
    BasicBlock blk;
    blk.label = exit_label(l);
    std::map<std::pair<int, int>, Operand> epval;
    std::function<Operand(Operand, int)> resolve = [&](Operand x,
                                                       int j) -> Operand {
      Operand orig_x = x;
      int hops = 0;
      while (x.is_value() && bld.info.param_index.count(x.value)) {
        x = bld.self_edge.args[bld.info.param_index.at(x.value)];
        ++hops;
      }
      if (x.is_imm()) return x;
      auto def = bld.info.def_op.find(x.value);
      if (def == bld.info.def_op.end()) return x;  // live-in
      int a = def->second;
      if (bld.stage(a) > j + hops) return epval.at({j + hops, a});
      if (shared) return ep_boundary(orig_x, j);
      return bld.rstat(orig_x, l - 1 - j);
    };

    std::vector<CopyRef> copies;
    for (int j = 0; j < l; ++j)
      for (size_t op = 0; op < loop.ops.size(); ++op) {
        if (int(op) == term_index) continue;
        int w = bld.stage(int(op));
        if (w < j + 1) continue;
        copies.push_back(CopyRef{int(op), j, ms.placements[op].t - (j + 1) * II,
                                 ms.placements[op].pe});
      }
    std::sort(copies.begin(), copies.end(), by_row_term_last);
    BlockSeed seed;
    seed.label = blk.label;
    int max_row = -1;
    for (const CopyRef& c : copies) {
      const Operation& src = loop.ops[c.op];
      Operation copy;
      copy.opcode = src.opcode;
      for (const auto& x : src.operands)
        copy.operands.push_back(resolve(x, c.inst));
      if (src.result) {
        copy.result = bld.fresh();
        epval[{c.inst, c.op}] = Operand::val(*copy.result);
        pin_value(*copy.result, c.pe, rc_of_op(c.op, loop));
      }
      blk.ops.push_back(std::move(copy));
      seed.placement.push_back(OpPlacement{c.row, c.pe});
      max_row = std::max(max_row, c.row);
    }
    Operation jump;
    jump.opcode = Opcode::Jump;
    SuccessorRef to_exit{bld.exit_edge.label, {}};
    for (const auto& a : bld.exit_edge.args)
      to_exit.args.push_back(resolve(a, 0));
    jump.successors = {to_exit};
    blk.ops.push_back(std::move(jump));
    seed.placement.push_back(OpPlacement{max_row + 1, 0});
    exit_blocks.push_back(std::move(blk));
    exit_seeds.push_back(std::move(seed));
  }

  // Kernel params exist now (epilogue resolution may have added chains).
  for (const auto& kp : bld.kparams) {
    kernel.params.push_back(BlockParam{kp.id});
    pin_value(kp.id, ms.placements[kp.op].pe, rc_of_op(kp.op, loop));
  }
  BasicBlock& shared_ep = exit_blocks.front();
  for (const auto& p : ep_params) {
    shared_ep.params.push_back(BlockParam{p.id});
    if (p.from_kernel.is_value())
      for (const auto& pin : result.pins)
        if (pin.value == p.from_kernel.value) {
          pin_value(p.id, pin.pe, pin.reg_class);
          break;
        }
  }

  // Finish the branches now that both param lists are stable.
  {
    BasicBlock& last_fill = fill_blocks[S - 2];
    Operation& br = last_fill.ops.back();
    for (const auto& p : ep_params) br.successors[0].args.push_back(p.from_fill);
    for (const auto& kp : bld.kparams) br.successors[1].args.push_back(kp.init);
  }
  {
    SuccessorRef to_self{kernel.label, {}};
    for (const auto& kp : bld.kparams) {
      Operand arg = Operand::val(kNoValue);
      if (kp.delta == 1) {
        arg = bld.kval.at({bld.stage(kp.op), kp.op});
      } else {
        for (const auto& other : bld.kparams)
          if (other.op == kp.op && other.delta == kp.delta - 1)
            arg = Operand::val(other.id);
      }
      to_self.args.push_back(arg);
    }
    SuccessorRef to_ep{exit_label(S - 1), {}};
    for (const auto& p : ep_params) to_ep.args.push_back(p.from_kernel);
    kbranch.successors = {to_self, to_ep};
    kernel.ops.push_back(std::move(kbranch));
  }

  for (const auto& [v, home] : service.live_in_home)
    pin_value(v, home, RegClass::Internal);
  for (size_t j = 0; j < loop.params.size(); ++j) {
    auto r = bld.info.chase(Operand::val(loop.params[j].value));
    if (r.op >= 0)
      pin_value(loop.params[j].value, ms.placements[r.op].pe,
                rc_of_op(r.op, loop));
    else if (r.external != kNoValue)
      pin_value(loop.params[j].value, service.live_in_home.at(r.external),
                RegClass::Internal);
  }

  // Splice [ST_1 .. ST_{S-1}, kernel, EP_{S-1} .. EP_1] over the loop block;
  // fallthrough pairs are adjacent by construction.
  int at = f.block_index(base);
  f.blocks.erase(f.blocks.begin() + at);
  std::vector<BasicBlock> splice;
  for (auto& blk : fill_blocks) splice.push_back(std::move(blk));
  splice.push_back(std::move(kernel));
  for (auto& blk : exit_blocks) splice.push_back(std::move(blk));
  f.blocks.insert(f.blocks.begin() + at,
                  std::make_move_iterator(splice.begin()),
                  std::make_move_iterator(splice.end()));

  for (int l = 1; l <= S; ++l) result.stage_blocks.push_back(stage_label(l));
  for (int l = S - 1; l >= 1; --l) result.exit_blocks.push_back(exit_label(l));
  for (auto& s : fill_seeds) result.seeds.push_back(std::move(s));
  result.seeds.push_back(std::move(kseed));
  for (auto& s : exit_seeds) result.seeds.push_back(std::move(s));

  Diagnostics post = verify(f);
  if (!post.empty())
    throw std::runtime_error("adapt_cfg broke the function:\n" +
                             diagnostics_to_string(post) + print_schedule(ms));
  return result;
}

}  // namespace cgraflow

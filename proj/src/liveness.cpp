#include "cgraflow/liveness.hpp"

#include <algorithm>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace cgraflow {

void solve_liveness(const DataflowProblem& p, std::vector<std::set<ValueId>>& in,
                    std::vector<std::set<ValueId>>& out, int* iterations) {
  size_t n = p.succ.size();
  in.assign(n, {});
  out.assign(n, {});
  int sweeps = 0;
  bool changed = true;
  while (changed) {
    changed = false;
    ++sweeps;
    for (int b = static_cast<int>(n) - 1; b >= 0; --b) {
      std::set<ValueId> new_out;
      for (int s : p.succ[b]) new_out.insert(in[s].begin(), in[s].end());
      if (new_out != out[b]) {
        out[b] = std::move(new_out);
        changed = true;
      }
      std::set<ValueId> new_in = p.use[b];
      for (ValueId v : out[b])
        if (!p.def[b].count(v)) new_in.insert(v);
      if (new_in != in[b]) {
        in[b] = std::move(new_in);
        changed = true;
      }
    }
  }
  if (iterations) *iterations = sweeps;
}

LivenessSets compute_liveness(const CdfgFunction& f) {
  size_t n = f.blocks.size();
  DataflowProblem p;
  p.succ.resize(n);
  p.use.resize(n);
  p.def.resize(n);
  for (size_t bi = 0; bi < n; ++bi) {
    const BasicBlock& b = f.blocks[bi];
    for (const auto& param : b.params) p.def[bi].insert(param.value);
    for (const auto& op : b.ops) {
      auto use_value = [&](const Operand& o) {
        if (o.is_value() && !p.def[bi].count(o.value)) p.use[bi].insert(o.value);
      };
      for (const auto& o : op.operands) use_value(o);
      for (const auto& s : op.successors)
        for (const auto& a : s.args) use_value(a);
      if (op.result) p.def[bi].insert(*op.result);
    }
    for (const auto& s : f.blocks[bi].terminator().successors)
      p.succ[bi].push_back(f.block_index(s.label));
  }
  LivenessSets sets;
  sets.use = p.use;
  sets.def = p.def;
  solve_liveness(p, sets.in, sets.out, &sets.iterations);
  return sets;
}

BlockTiming estimate_timing(const CdfgFunction& f) {
  BlockTiming timing;
  timing.blocks.resize(f.blocks.size());
  long long cursor = 0;
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const BasicBlock& b = f.blocks[bi];
    auto& entry = timing.blocks[bi];
    entry.op_offset.assign(b.ops.size(), 0);
    std::map<ValueId, long long> depth_of;
    long long max_depth = -1;
    for (size_t oi = 0; oi < b.ops.size(); ++oi) {
      const Operation& op = b.ops[oi];
      if (is_terminator(op.opcode)) break;
      long long d = 0;
      for (const auto& o : op.operands) {
        if (!o.is_value()) continue;
        auto it = depth_of.find(o.value);
        if (it != depth_of.end()) d = std::max(d, it->second + 1);
      }
      entry.op_offset[oi] = d;
      if (op.result) depth_of[*op.result] = d;
      max_depth = std::max(max_depth, d);
    }
    long long term_offset = max_depth + 1;  // 0 when the block is bare
    if (!b.ops.empty()) entry.op_offset[b.ops.size() - 1] = term_offset;
    entry.t_init = cursor;
    entry.t_term = cursor + std::max<long long>(term_offset, 1);
    cursor = entry.t_term + 1;
  }
  return timing;
}

PathQuery path_length(const CdfgFunction& f, const BlockTiming& timing,
                      int prod_block, long long prod_offset, int cons_block,
                      long long cons_offset, bool back_edge) {
  PathQuery q;
  if (prod_block == cons_block && !back_edge) {
    q.blocks = {prod_block};
    q.length = 1;
    return q;
  }
  const auto spans = [&](int b) { return timing.blocks[b].span(); };
  if (prod_block == cons_block) {  // loop-carried within one block
    q.blocks = {prod_block};
    q.length = (spans(prod_block) - cons_offset) + prod_offset;
    q.length = std::max<long long>(q.length, 1);
    return q;
  }

  // Shortest simple path by L over a bounded DFS of the CFG.
  std::vector<std::vector<int>> succ(f.blocks.size());
  for (size_t bi = 0; bi < f.blocks.size(); ++bi)
    for (const auto& s : f.blocks[bi].terminator().successors)
      succ[bi].push_back(f.block_index(s.label));

  long long best = -1;
  std::vector<int> best_path;
  std::vector<int> path{prod_block};
  std::vector<bool> visited(f.blocks.size(), false);
  visited[prod_block] = true;
  int explored = 0;
  std::function<void(int, long long)> dfs = [&](int b, long long mid_span) {
    if (++explored > 20000) return;
    if (b == cons_block) {
      long long len = (spans(prod_block) - prod_offset) + mid_span + cons_offset;
      len = std::max<long long>(len, 1);
      if (best < 0 || len < best) {
        best = len;
        best_path = path;
      }
      return;
    }
    for (int s : succ[b]) {
      if (visited[s]) continue;
      visited[s] = true;
      path.push_back(s);
      long long add = (b == prod_block) ? 0 : spans(b);
      dfs(s, mid_span + add);
      path.pop_back();
      visited[s] = false;
    }
  };
  // Seed: explore successors of the producer block.
  for (int s : succ[prod_block]) {
    if (s == prod_block) continue;
    visited[s] = true;
    path.push_back(s);
    dfs(s, 0);
    path.pop_back();
    visited[s] = false;
  }
  if (best < 0)
    throw std::runtime_error("no CFG path from producer to consumer block");
  q.blocks = best_path;  // prod_block first, cons_block last
  q.length = best;
  return q;
}

LiveValueEntry LiveValueTable::entry(ValueId v) const {
  auto it = index_.find(v);
  if (it == index_.end())
    throw std::runtime_error("value %" + std::to_string(v) +
                             " is not in the live value table");
  int c = find(it->second);
  LiveValueEntry e;
  e.value = v;
  e.class_id = c;
  e.reg_class = classes_[c].rc;
  e.producer_pe = classes_[c].pe;
  e.reg_index = classes_[c].slot;
  e.max_path = classes_[c].max_path;
  return e;
}

int LiveValueTable::find(int c) const {
  while (parent_[c] != c) {
    parent_[c] = parent_[parent_[c]];
    c = parent_[c];
  }
  return c;
}

int LiveValueTable::add_value(ValueId v) {
  auto it = index_.find(v);
  if (it != index_.end()) return find(it->second);
  int c = static_cast<int>(classes_.size());
  classes_.push_back(LocClass{});
  parent_.push_back(c);
  index_[v] = c;
  return c;
}

void LiveValueTable::join(ValueId a, ValueId b) {
  int ca = find(add_value(a));
  int cb = find(add_value(b));
  if (ca == cb) return;
  if (cb < ca) std::swap(ca, cb);
  parent_[cb] = ca;
}

void LiveValueTable::finalize_class(int class_id, RegClass rc,
                                    long long max_path) {
  int c = find(class_id);
  classes_[c].rc = rc;
  classes_[c].max_path = max_path;
}

void LiveValueTable::set_producer_pe(ValueId v, int pe) {
  int c = find(index_.at(v));
  if (classes_[c].pe >= 0 && classes_[c].pe != pe)
    throw std::runtime_error(
        "producer PE for %" + std::to_string(v) + " already fixed to PE" +
        std::to_string(classes_[c].pe) + ", got PE" + std::to_string(pe));
  classes_[c].pe = pe;
}

void LiveValueTable::set_reg_index(ValueId v, int slot) {
  int c = find(index_.at(v));
  classes_[c].slot = slot;
}

void LiveValueTable::force_class(ValueId v, RegClass rc) {
  int c = find(index_.at(v));
  classes_[c].rc = rc;
}

std::vector<LiveValueEntry> LiveValueTable::rows() const {
  std::vector<LiveValueEntry> out;
  out.reserve(index_.size());
  for (const auto& [v, c] : index_) out.push_back(entry(v));
  return out;
}

std::string LiveValueTable::dump() const {
  std::ostringstream os;
  for (const auto& row : rows()) {
    os << "%" << row.value << " class=" << row.class_id << " "
       << (row.reg_class == RegClass::External ? "E" : "I")
       << " pe=" << (row.producer_pe < 0 ? std::string("?")
                                         : std::to_string(row.producer_pe))
       << " reg=" << (row.reg_index < 0 ? std::string("?")
                                        : std::to_string(row.reg_index))
       << " maxL=" << row.max_path << "\n";
  }
  return os.str();
}

namespace {

struct DefSite {
  int block = -1;
  int op = -1;  // -1 for params (defined at block start)
};

struct UseSite {
  int block = -1;
  int op = -1;
};

}  // namespace

LiveValueTable classify_live_values(const CdfgFunction& f,
                                    const LivenessSets& live,
                                    const BlockTiming& timing, int theta) {
  LiveValueTable table;

  // Cross-block values: everything live into some block, every block
  // parameter, and every value passed as a block argument (the boundary
  // values of Fig. 8a's table).
  std::set<ValueId> cross;
  for (const auto& s : live.in) cross.insert(s.begin(), s.end());
  for (const auto& b : f.blocks) {
    for (const auto& p : b.params) cross.insert(p.value);
    for (const auto& s : b.terminator().successors)
      for (const auto& a : s.args)
        if (a.is_value()) cross.insert(a.value);
  }
  for (ValueId v : cross) table.add_value(v);

  // Values passed as block arguments share the parameter's location.
  for (const auto& b : f.blocks)
    for (const auto& s : b.terminator().successors) {
      const BasicBlock* target = f.find_block(s.label);
      for (size_t k = 0; k < s.args.size(); ++k)
        if (s.args[k].is_value())
          table.join(s.args[k].value, target->params[k].value);
    }

  // Def and use sites of every cross value.
  std::map<ValueId, std::vector<DefSite>> defs;
  std::map<ValueId, std::vector<UseSite>> uses;
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const BasicBlock& b = f.blocks[bi];
    for (const auto& p : b.params)
      if (cross.count(p.value))
        defs[p.value].push_back(DefSite{int(bi), -1});
    for (size_t oi = 0; oi < b.ops.size(); ++oi) {
      const Operation& op = b.ops[oi];
      if (op.result && cross.count(*op.result))
        defs[*op.result].push_back(DefSite{int(bi), int(oi)});
      for (const auto& o : op.operands)
        if (o.is_value() && cross.count(o.value))
          uses[o.value].push_back(UseSite{int(bi), int(oi)});
      // Branch argument passing is location plumbing, not a consumer.
    }
  }

  // Group members per class, then take the worst producer-to-consumer path
  // over all def/use pairs of the class.
  std::map<int, std::vector<ValueId>> members;
  for (ValueId v : cross) members[table.class_of(v)].push_back(v);

  for (auto& [cid, vals] : members) {
    long long max_len = 1;
    for (ValueId dv : vals) {
      for (const DefSite& d : defs[dv]) {
        long long d_off =
            d.op < 0 ? 0 : timing.blocks[d.block].op_offset[d.op];
        for (ValueId uv : vals) {
          for (const UseSite& u : uses[uv]) {
            long long u_off = timing.blocks[u.block].op_offset[u.op];
            bool same_value = (dv == uv);
            long long len;
            if (d.block == u.block) {
              bool forward = same_value;  // SSA: same-block use follows def
              len = forward ? 1
                            : std::max<long long>(
                                  (timing.blocks[d.block].span() - u_off) +
                                      d_off,
                                  1);
            } else {
              if (same_value) {
                len = path_length(f, timing, d.block, d_off, u.block, u_off,
                                  false)
                          .length;
              } else {
                try {
                  len = path_length(f, timing, d.block, d_off, u.block, u_off,
                                    false)
                            .length;
                } catch (const std::exception&) {
                  continue;  // joined pair with no flow between the sites
                }
              }
            }
            max_len = std::max(max_len, len);
          }
        }
      }
    }
    RegClass rc = max_len <= theta ? RegClass::External : RegClass::Internal;
    table.finalize_class(cid, rc, max_len);
  }
  return table;
}

std::string dump_liveness(const CdfgFunction& f, const LivenessSets& live,
                          const LiveValueTable& table) {
  std::ostringstream os;
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    os << f.blocks[bi].label << ":";
    os << " in={";
    bool first = true;
    for (ValueId v : live.in[bi]) {
      os << (first ? "" : ", ") << "%" << v;
      first = false;
    }
    os << "} out={";
    first = true;
    for (ValueId v : live.out[bi]) {
      os << (first ? "" : ", ") << "%" << v;
      first = false;
    }
    os << "}\n";
  }
  os << "live values:\n" << table.dump();
  return os.str();
}

}  // namespace cgraflow

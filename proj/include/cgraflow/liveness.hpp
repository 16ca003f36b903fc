#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"

namespace cgraflow {

// Backward dataflow over use/def/succ; usable on raw sets so tests can
// cross-check the fixed point against path enumeration.
struct DataflowProblem {
  std::vector<std::vector<int>> succ;
  std::vector<std::set<ValueId>> use;
  std::vector<std::set<ValueId>> def;
};

struct LivenessSets {
  std::vector<std::set<ValueId>> use, def, in, out;
  int iterations = 0;  // sweeps until the fixed point
};

// Fixed point of In[b] = use[b] u (Out[b] - def[b]), Out[b] = U In[succ].
void solve_liveness(const DataflowProblem& p, std::vector<std::set<ValueId>>& in,
                    std::vector<std::set<ValueId>>& out, int* iterations = nullptr);

// Block arguments of successors count as uses at the branch site; block
// params count as defs of their block.
LivenessSets compute_liveness(const CdfgFunction& f);

// Pre-mapping schedule estimate: per-block span is the DFG critical path,
// op offsets are ASAP depths, the terminator comes last. Exact after
// mapping, when refreshed for reporting.
struct BlockTiming {
  struct Entry {
    long long t_init = 0;               // block start cycle
    long long t_term = 0;               // cycle of the terminal control op
    std::vector<long long> op_offset;   // per op index, relative to t_init
    long long span() const { return t_term - t_init; }
  };
  std::vector<Entry> blocks;  // indexed like f.blocks
};

BlockTiming estimate_timing(const CdfgFunction& f);

struct PathQuery {
  std::vector<int> blocks;  // simple CFG path, producer block to consumer block
  long long length = 1;
};

// Live-path length between a producer and a consumer position.
// Same-block forward use: L = 1. Same-block back edge:
// L = (t_term - t_consumer) + (t_producer - t_init). Cross-block: producer
// tail, full spans of intermediate blocks on the shortest simple path, and
// the consumer prefix. Throws when no CFG path exists.
PathQuery path_length(const CdfgFunction& f, const BlockTiming& timing,
                      int prod_block, long long prod_offset, int cons_block,
                      long long cons_offset, bool back_edge);

enum class RegClass { External, Internal };

struct LiveValueEntry {
  ValueId value = kNoValue;
  int class_id = -1;  // location equivalence class (joined by block args)
  RegClass reg_class = RegClass::Internal;
  int producer_pe = -1;  // -1 until the defining block is mapped
  int reg_index = -1;    // -1 until register allocation
  long long max_path = 1;
};

// Cross-block values and their register homes. Values joined through block
// arguments share one location class: a single PE, class, and slot.
class LiveValueTable {
 public:
  bool contains(ValueId v) const { return index_.count(v) != 0; }
  LiveValueEntry entry(ValueId v) const;
  RegClass reg_class(ValueId v) const { return entry(v).reg_class; }
  int producer_pe(ValueId v) const { return entry(v).producer_pe; }
  int class_of(ValueId v) const { return entry(v).class_id; }

  // Unknown -> known exactly once per class; re-setting the same PE is a
  // no-op, a different PE is an internal error.
  void set_producer_pe(ValueId v, int pe);
  void set_reg_index(ValueId v, int slot);
  void force_class(ValueId v, RegClass rc);  // modulo seeding only

  std::vector<LiveValueEntry> rows() const;  // sorted by value id
  std::string dump() const;

  // Construction interface used by classify_live_values.
  int add_value(ValueId v);                // returns class id
  void join(ValueId a, ValueId b);
  void finalize_class(int class_id, RegClass rc, long long max_path);

 private:
  struct LocClass {
    int pe = -1;
    int slot = -1;
    RegClass rc = RegClass::Internal;
    long long max_path = 1;
  };
  int find(int c) const;
  std::map<ValueId, int> index_;
  mutable std::vector<int> parent_;
  std::vector<LocClass> classes_;
};

// Eq. 3: a value is External iff the longest producer-to-consumer live path
// of its location class stays within theta; otherwise Internal. Every value
// in any In set plus every block argument receives exactly one entry.
LiveValueTable classify_live_values(const CdfgFunction& f,
                                    const LivenessSets& live,
                                    const BlockTiming& timing, int theta);

std::string dump_liveness(const CdfgFunction& f, const LivenessSets& live,
                          const LiveValueTable& table);

}  // namespace cgraflow

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"
#include "cgraflow/liveness.hpp"
#include "cgraflow/memory.hpp"
#include "cgraflow/modulo.hpp"

namespace cgraflow {

// Per-block placement constraints of the exact mapper. The model references
// ops by in-block index; cycles are block-local with t_init = 0.
struct BlockModel {
  std::string label;
  int block_index = -1;
  int nops = 0;
  int term_index = -1;
  int horizon = 0;  // inclusive bound on t_control

  struct LiveIn {
    ValueId value = kNoValue;
    int pe = -1;
    RegClass rc = RegClass::External;
    std::vector<int> consumers;
    bool to_block_end = false;  // still live out of this block
  };
  std::vector<LiveIn> live_ins;

  struct DepEdge {
    int from = -1;
    int to = -1;
    bool flag = false;
  };
  std::vector<DepEdge> deps;

  std::vector<std::pair<int, int>> mem_order;  // (earlier, later) op indices

  struct ExtLiveOut {
    ValueId value = kNoValue;
    int def_op = -1;
  };
  std::vector<ExtLiveOut> ext_live_outs;

  // Ops whose results belong to a location class with a known PE.
  std::map<int, int> pinned_pe;
  // Ops whose results share a location class (must share a PE), keyed by
  // class id; includes classes whose PE is still unknown.
  std::map<int, std::vector<int>> class_groups;
  // Internal-class values of Out[b] already fixed to a PE outside this block.
  std::map<int, int> internal_out_fixed;  // pe -> count
  // Internal-class live-outs defined here: op index -> class id.
  std::map<int, int> internal_out_defs;

  std::map<std::string, int> constraint_counts;
};

BlockModel build_model(const CdfgFunction& f, const std::string& label,
                       const ArchConfig& arch, const LiveValueTable& table,
                       const LivenessSets& live);

struct BlockSolution {
  std::vector<OpPlacement> ops;  // block-local cycles
  int t_control = 0;             // objective: t_control - t_init, t_init = 0
  bool proven_optimal = false;
};

enum class InfeasibleKind { Routing, RegisterOverflow, Horizon, Budget };

struct SolveOutcome {
  std::optional<BlockSolution> solution;
  InfeasibleKind kind = InfeasibleKind::Horizon;
  int culprit_op = -1;
  ValueId culprit_value = kNoValue;
  std::string detail;
};

// Deterministic branch-and-bound over (t, PE) pairs: ops in block order,
// cycles ascending, PEs row-major; minimizes t_control. The terminal
// control op takes a row of its own (the spec's objective examples fix
// this interpretation); seeded modulo blocks are validated, not solved.
SolveOutcome solve_block(const CdfgFunction& f, const BlockModel& model,
                         const ArchConfig& arch, long long budget = 400000);

// Independent re-check of Eqs. 4-14 (plus flag adjacency) on a concrete
// assignment; diagnostics name the violated equation.
Diagnostics validate_mapping(const CdfgFunction& f, const std::string& label,
                             const std::vector<OpPlacement>& ops,
                             const ArchConfig& arch, const LiveValueTable& table,
                             const LivenessSets& live);

struct EvictionRecord {
  ValueId value = kNoValue;
  uint32_t slot = 0;
  std::string store_block;
  std::vector<std::string> load_blocks;
};

struct MappingSolution {
  std::map<std::string, BlockSolution> blocks;
  std::map<std::string, int> t_init;  // global starting row, set at emission
  std::vector<EvictionRecord> evictions;
  int moves_inserted = 0;
};

// Everything the top-level scheduler owns and may rewrite while mapping.
struct MapContext {
  CdfgFunction f;
  DataLayout layout;
  ArchConfig arch;
  LiveValueTable table;
  LivenessSets live;
  std::vector<BlockSeed> seeds;   // modulo-scheduled blocks, processed first
  long long solver_budget = 400000;
};

// Max-try-or-roll-back on one failing block: up to N = min(max_moves, D-1)
// routing moves (add v, 0), then roll back and split through an eviction
// slot. Returns the eviction record when a spill happened. Previously
// solved blocks are never re-solved; a spilled producer block only gains a
// store row.
std::optional<EvictionRecord> handle_failure(
    MapContext& ctx, const std::string& label, const SolveOutcome& failure,
    MappingSolution& solution, const std::set<std::string>& solved);

// Maps every block: seeded blocks first (placements reused verbatim), the
// rest in reverse post-order, producer placements recorded in the live value
// table as each defining block lands.
MappingSolution schedule_cdfg(MapContext& ctx);

}  // namespace cgraflow

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cgraflow/backend.hpp"
#include "cgraflow/ir.hpp"
#include "cgraflow/legalize.hpp"
#include "cgraflow/liveness.hpp"
#include "cgraflow/mapper.hpp"
#include "cgraflow/memory.hpp"
#include "cgraflow/modulo.hpp"
#include "cgraflow/sim.hpp"
#include "cgraflow/simplify.hpp"

namespace cgraflow {

struct PipelineOptions {
  ArchConfig arch;
  std::set<TransformKind> passes;      // CFG simplification subset
  bool modulo = false;                 // built-in scheduler on loop blocks
  std::string imported_schedule;       // schedule text; overrides the builtin
  int ii_max = 16;
  long long solver_budget = 400000;
};

struct LoopReport {
  std::string block;
  int res_mii = 0;
  int rec_mii = 0;
  int ii = 0;      // 0 when not pipelined
  int length = 0;
  int stages = 0;
  std::string note;
};

struct CompileResult {
  CdfgFunction original;   // as parsed
  CdfgFunction final_ir;   // simplified, legalized, adapted, spill-patched
  DataLayout layout;       // input bindings plus eviction slots
  MergeReport merges;
  std::vector<LoopReport> loops;
  LiveValueTable table;
  LivenessSets live;
  MappingSolution solution;
  RegisterAssignment regs;
  AsmProgram program;
  std::vector<uint8_t> binary;
  std::map<std::string, double> stage_ms;  // wall clock per stage
};

// The full flow: parse -> simplify -> legalize -> modulo -> liveness ->
// map -> registers -> assembly -> binary.
CompileResult compile_function(const std::string& ir_text,
                               const std::string& layout_text,
                               const PipelineOptions& opts);

// Dump helpers for the CLI's --emit artifacts.
std::string dump_map(const CompileResult& result);
std::string dump_liveness_artifact(const CompileResult& result);

// Zero-filled store covering every binding and the eviction pool.
Memory make_memory(const DataLayout& layout);

// End-to-end check: interpreter on the original function vs the simulator
// on the compiled program, bound regions only.
OracleVerdict check_compiled(const CompileResult& result, const Memory& initial,
                             const SimOptions& opts = {});

}  // namespace cgraflow

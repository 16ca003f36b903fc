#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cgraflow/backend.hpp"
#include "cgraflow/interp.hpp"
#include "cgraflow/memory.hpp"

namespace cgraflow {

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SimResult {
  Memory memory;
  long long cycles = 0;
  std::vector<double> utilization;  // per PE, non-NOP issue ratio
  std::vector<std::string> trace;   // one line per cycle when tracing
  bool halted = false;
};

struct SimOptions {
  long long max_cycles = 1 << 22;
  bool trace = false;
};

// Synchronous mesh under one global PC: every PE executes its row's
// instruction each cycle, register and neighbor reads observe the previous
// cycle's values, flags persist across NOPs, loads see memory before the
// cycle's store. Halts on a jump targeting its own row.
SimResult run_program(const AsmProgram& prog, const ArchConfig& arch,
                      Memory memory, const SimOptions& opts = {});

struct OracleVerdict {
  bool equal = false;
  std::string detail;  // first mismatch or fault attribution
  InterpResult interp;
  SimResult sim;
};

// Runs the interpreter on `f` and the simulator on `prog` over identical
// initial memory and compares every bound region word for word; compiler
// eviction slots live outside the bindings and are excluded.
OracleVerdict compare_with_oracle(const CdfgFunction& f, const AsmProgram& prog,
                                  const ArchConfig& arch,
                                  const DataLayout& layout,
                                  const Memory& initial,
                                  const SimOptions& opts = {});

}  // namespace cgraflow

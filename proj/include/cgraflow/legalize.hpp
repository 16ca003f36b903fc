#pragma once

#include <stdexcept>

#include "cgraflow/ir.hpp"
#include "cgraflow/memory.hpp"

namespace cgraflow {

class LegalizeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Grounds memory references: pointer arguments become base-address
// immediates, scalar arguments become a single load from their slot.
void lower_memory(CdfgFunction& f, const DataLayout& layout);

// Rewrites compare/select/condbr into setflags plus flag-keyed ops and
// connects blocks with jump and the four predicate branches. Branch
// arguments are materialized as values so every block parameter has a
// producing op.
void lower_flags_and_branches(CdfgFunction& f);

// Decomposes immediates that exceed the ISA's signed immediate fields into
// in-range constant construction plus arithmetic, and leaves at most one
// immediate operand per instruction. Always succeeds.
void legalize_immediates(CdfgFunction& f, const ArchConfig& arch);

// Empty iff every opcode is in the target ISA, every immediate is encodable,
// flag consumers sit after a same-block setflags, and every block ends with
// exactly one control op. Single source of truth for mapper and backend.
Diagnostics check_legal(const CdfgFunction& f, const ArchConfig& arch);

// Runs the full lowering pipeline and throws on a check_legal failure.
void legalize_function(CdfgFunction& f, const DataLayout& layout,
                       const ArchConfig& arch);

}  // namespace cgraflow

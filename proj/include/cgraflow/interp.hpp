#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>

#include "cgraflow/ir.hpp"
#include "cgraflow/memory.hpp"

namespace cgraflow {

class InterpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InterpResult {
  Memory memory;
  std::optional<Word> ret;
  uint64_t ops_executed = 0;
};

// Big-step SSA execution; block-argument passing implements phi semantics.
// Handles both high-level and legalized opcodes (a setflags result carries
// a-b; fsel/fzsel and the predicate branches test its sign/zero).
// Comparisons are defined through wrapping subtraction, matching the flag
// semantics of the target ISA bit for bit.
InterpResult interpret(const CdfgFunction& f, Memory memory,
                       const std::map<ValueId, Word>& args,
                       uint64_t max_steps = 1u << 22);

// Binds pointer args to their layout base addresses and scalar args to the
// word currently stored at their layout slot.
std::map<ValueId, Word> bind_args(const CdfgFunction& f,
                                  const DataLayout& layout,
                                  const Memory& memory);

}  // namespace cgraflow

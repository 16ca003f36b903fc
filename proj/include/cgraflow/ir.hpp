#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace cgraflow {

// 32-bit two's complement datapath with wrapping arithmetic. Pointers are
// plain word addresses; memory is byte-addressed with 4-byte word accesses.
using Word = int32_t;

inline Word wrap_add(Word a, Word b) {
  return static_cast<Word>(static_cast<uint32_t>(a) + static_cast<uint32_t>(b));
}
inline Word wrap_sub(Word a, Word b) {
  return static_cast<Word>(static_cast<uint32_t>(a) - static_cast<uint32_t>(b));
}
inline Word wrap_mul(Word a, Word b) {
  return static_cast<Word>(static_cast<uint32_t>(a) * static_cast<uint32_t>(b));
}

// Values are function-wide unique SSA ids, printed as %N.
using ValueId = uint32_t;
constexpr ValueId kNoValue = 0xFFFFFFFFu;

enum class Opcode : uint8_t {
  // High-level ops accepted by the parser.
  Const,
  Add,
  Sub,
  Mul,
  Lt,
  Ge,
  Eq,
  Ne,
  Select,
  Load,
  Store,
  Br,
  CondBr,
  Ret,
  // Target ISA ops introduced by legalization. Comparison ops lower to
  // SetFlags (computes a-b, records zero/sign) plus a flag consumer.
  Jump,
  SetFlags,
  Fsel,   // sign flag set ? a : b
  Fzsel,  // zero flag set ? a : b
  Bge,
  Blt,
  Beq,
  Bne,
};

const char* opcode_name(Opcode op);
std::optional<Opcode> opcode_from_name(const std::string& name);

bool is_terminator(Opcode op);
bool is_compare(Opcode op);
// Conditional flag-keyed branches (bge/blt/beq/bne).
bool is_flag_branch(Opcode op);
// Ops that write the issuing PE's output register.
bool writes_rout(Opcode op);
// Ops that update the zero/sign flags (all ALU ops; loads and stores do not).
bool writes_flags(Opcode op);

// An operand is either an SSA value or an immediate word.
struct Operand {
  enum class Kind : uint8_t { Value, Imm } kind = Kind::Imm;
  ValueId value = kNoValue;
  Word imm = 0;

  static Operand val(ValueId v) { return Operand{Kind::Value, v, 0}; }
  static Operand immediate(Word w) { return Operand{Kind::Imm, kNoValue, w}; }
  bool is_value() const { return kind == Kind::Value; }
  bool is_imm() const { return kind == Kind::Imm; }
  bool operator==(const Operand& o) const {
    return kind == o.kind && (is_value() ? value == o.value : imm == o.imm);
  }
};

// Branch destination: target label plus the arguments bound to the target's
// block parameters. Block arguments model phi nodes edge-locally.
struct SuccessorRef {
  std::string label;
  std::vector<Operand> args;
  bool operator==(const SuccessorRef& o) const {
    return label == o.label && args == o.args;
  }
};

struct Operation {
  Opcode opcode = Opcode::Const;
  std::optional<ValueId> result;
  std::vector<Operand> operands;
  // Successor list for terminators: br/jump have one, condbr and the flag
  // branches have two (taken first, fallthrough second), ret has none.
  std::vector<SuccessorRef> successors;

  bool operator==(const Operation& o) const {
    return opcode == o.opcode && result == o.result && operands == o.operands &&
           successors == o.successors;
  }
};

struct BlockParam {
  ValueId value = kNoValue;
  bool operator==(const BlockParam& o) const { return value == o.value; }
};

struct BasicBlock {
  std::string label;
  std::vector<BlockParam> params;
  std::vector<Operation> ops;  // last op is the terminator

  const Operation& terminator() const { return ops.back(); }
  bool operator==(const BasicBlock& o) const {
    return label == o.label && params == o.params && ops == o.ops;
  }
};

enum class ArgKind : uint8_t { Scalar, Pointer };

struct FuncArg {
  ValueId value = kNoValue;
  ArgKind kind = ArgKind::Scalar;
  bool operator==(const FuncArg& o) const {
    return value == o.value && kind == o.kind;
  }
};

struct CdfgFunction {
  std::string name;
  std::vector<FuncArg> args;
  std::vector<BasicBlock> blocks;  // first block is the entry

  const BasicBlock* find_block(const std::string& label) const;
  BasicBlock* find_block(const std::string& label);
  int block_index(const std::string& label) const;  // -1 if absent
  // Smallest id strictly above every id used in the function.
  ValueId next_value_id() const;

  bool operator==(const CdfgFunction& o) const {
    return name == o.name && args == o.args && blocks == o.blocks;
  }
};

// Mesh geometry and ISA limits for one target instance.
struct ArchConfig {
  int rows = 4;
  int cols = 4;
  int regs = 4;       // internal registers per PE (N_r)
  bool torus = false; // wraparound neighbor links
  int imm_width = 12; // signed immediate bit width (add-class default)
  int theta = 4;      // live-path-length threshold for External placement
  int max_moves = -1; // routing-move budget; -1 means D-1

  int num_pes() const { return rows * cols; }
  // Longest shortest-path hop count between any PE pair (D).
  int diameter() const;
  int move_budget() const;  // min(max_moves, D-1), at least 0
  bool in_imm_range(Word w) const;
  Word imm_min() const { return -(Word(1) << (imm_width - 1)); }
  Word imm_max() const { return (Word(1) << (imm_width - 1)) - 1; }
  // Row-major neighbors of p under the configured connectivity, p excluded.
  std::vector<int> neighbors(int p) const;
  bool adjacent_or_same(int consumer, int producer) const;
  std::string validate() const;  // empty if well-formed

  static ArchConfig from_spec(const std::string& spec);  // "RxC"
};

struct Diagnostic {
  std::string message;
  std::string block;  // optional block label
  int line = 0;       // optional source line (parser only)
  int col = 0;
};

using Diagnostics = std::vector<Diagnostic>;

// Structural verifier: SSA single-def, dominance of uses, terminator
// placement, successor/param arity, reachability. Returns diagnostics
// instead of aborting.
Diagnostics verify(const CdfgFunction& f);
bool verify_ok(const CdfgFunction& f);
std::string diagnostics_to_string(const Diagnostics& diags);

// Drops side-effect-free ops whose results are never read (loads and stores
// are kept). Returns the number of ops removed.
int remove_dead_pure_ops(CdfgFunction& f);

// Drops blocks no longer reachable from the entry (after branch folding).
int remove_unreachable_blocks(CdfgFunction& f);

}  // namespace cgraflow

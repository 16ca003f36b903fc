#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"
#include "cgraflow/liveness.hpp"
#include "cgraflow/mapper.hpp"

namespace cgraflow {

enum class MachineOp : uint8_t {
  Nop = 0,
  Const,
  Add,
  Sub,
  Mul,
  Load,
  Store,
  SetFlags,
  Fsel,
  Fzsel,
  Jump,
  Bge,
  Blt,
  Beq,
  Bne,
};

const char* machine_op_name(MachineOp op);

// One mesh instruction. ALU results always reach Rout; a slot destination
// additionally latches the value into the PE's register file. Flag inputs
// are implicit (the issuing PE's own flags), so predicate ops carry only
// their data sources.
struct MInstr {
  MachineOp op = MachineOp::Nop;
  enum class Dest : uint8_t { Rout = 0, Slot } dest = Dest::Rout;
  int dest_slot = 0;

  struct Src {
    enum class Kind : uint8_t {
      None = 0,
      Imm,
      RoutSelf,
      Slot,
      NTop,
      NBottom,
      NLeft,
      NRight,
    } kind = Kind::None;
    int slot = 0;
    Word imm = 0;
    bool operator==(const Src& o) const {
      if (kind != o.kind) return false;
      if (kind == Kind::Imm) return imm == o.imm;
      if (kind == Kind::Slot) return slot == o.slot;
      return true;
    }
  };
  Src a, b;
  int target = -1;  // control ops only: absolute row

  bool operator==(const MInstr& o) const {
    return op == o.op && dest == o.dest &&
           (dest != Dest::Slot || dest_slot == o.dest_slot) && a == o.a &&
           b == o.b && target == o.target;
  }
};

bool is_control(MachineOp op);

// Global-PC-indexed instruction rows, one instruction (or NOP) per PE.
// At most one control instruction per row; ret lowers to a jump targeting
// its own row and the program carries no configuration loads of any kind.
struct AsmProgram {
  int rows = 0;
  int npes = 0;
  int mesh_cols = 0;
  std::vector<MInstr> grid;  // row-major: grid[row * npes + pe]
  std::map<std::string, int> block_index;  // label -> starting row
  int entry_row = 0;

  MInstr& at(int row, int pe) { return grid[row * npes + pe]; }
  const MInstr& at(int row, int pe) const { return grid[row * npes + pe]; }
};

// Per-PE slot numbers for internally held location classes.
struct RegisterAssignment {
  std::map<ValueId, int> slot_of;        // every internal table value
  std::map<int, int> slots_used_per_pe;  // pe -> count
};

// Global row layout with fallthrough jump elision decided.
struct RowLayout {
  std::map<std::string, int> start;
  int total_rows = 0;
};

RowLayout compute_layout(const CdfgFunction& f, const MappingSolution& solution);

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a PE needs more slots than it has; the pipeline evicts the
// named value and maps again.
class RegisterPressure : public BackendError {
 public:
  RegisterPressure(const std::string& msg, ValueId v)
      : BackendError(msg), value(v) {}
  ValueId value;
};

// Graph coloring over per-PE interference of internal location classes.
// Values routed PE-to-PE through Rout get no slot.
RegisterAssignment allocate_registers(const CdfgFunction& f,
                                      const MappingSolution& solution,
                                      const ArchConfig& arch,
                                      LiveValueTable& table,
                                      const LivenessSets& live);

AsmProgram emit_assembly(const CdfgFunction& f, MappingSolution& solution,
                         const RegisterAssignment& regs, const ArchConfig& arch,
                         const LiveValueTable& table, const LivenessSets& live);

std::string print_assembly(const AsmProgram& prog);

// Fixed 32-bit little-endian word per instruction, row-major by (row, PE):
//   [31:28] opcode  [27:24] dest (slot flag + index)
//   [23:18] srcA (kind:3, slot:3)  [17:12] srcB  [11:0] imm/target, signed.
// decode(encode(p)) reproduces the instruction grid exactly.
std::vector<uint8_t> encode_binary(const AsmProgram& prog);
AsmProgram decode_binary(const std::vector<uint8_t>& bytes,
                         const ArchConfig& arch);

}  // namespace cgraflow

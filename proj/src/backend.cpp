#include "cgraflow/backend.hpp"

#include <algorithm>
#include <cassert>
#include <set>
#include <sstream>

namespace cgraflow {

namespace {

MachineOp machine_op(Opcode op) {
  switch (op) {
    case Opcode::Const: return MachineOp::Const;
    case Opcode::Add: return MachineOp::Add;
    case Opcode::Sub: return MachineOp::Sub;
    case Opcode::Mul: return MachineOp::Mul;
    case Opcode::Load: return MachineOp::Load;
    case Opcode::Store: return MachineOp::Store;
    case Opcode::SetFlags: return MachineOp::SetFlags;
    case Opcode::Fsel: return MachineOp::Fsel;
    case Opcode::Fzsel: return MachineOp::Fzsel;
    case Opcode::Jump: return MachineOp::Jump;
    case Opcode::Bge: return MachineOp::Bge;
    case Opcode::Blt: return MachineOp::Blt;
    case Opcode::Beq: return MachineOp::Beq;
    case Opcode::Bne: return MachineOp::Bne;
    default:
      throw BackendError(std::string("opcode not in the target ISA: ") +
                         opcode_name(op));
  }
}

bool machine_writes_rout(MachineOp op) {
  switch (op) {
    case MachineOp::Nop:
    case MachineOp::Store:
    case MachineOp::Jump:
    case MachineOp::Bge:
    case MachineOp::Blt:
    case MachineOp::Beq:
    case MachineOp::Bne:
      return false;
    default:
      return true;
  }
}

// Rows a block occupies: t_control + 1, minus an elided trailing jump, plus
// an explicit fallthrough jump row after a predicate branch when the
// fallthrough target is not laid out next.
struct BlockRows {
  int body_rows = 0;     // rows holding the block's own ops
  bool drop_last = false;   // trailing jump elided
  bool extra_jump = false;  // fallthrough jump row appended
  std::string extra_target;
};

BlockRows analyze_block_rows(const CdfgFunction& f, size_t bi,
                             const BlockSolution& sol) {
  const BasicBlock& b = f.blocks[bi];
  const Operation& term = b.terminator();
  const std::string next =
      bi + 1 < f.blocks.size() ? f.blocks[bi + 1].label : "";
  BlockRows rows;
  rows.body_rows = sol.t_control + 1;
  if (term.opcode == Opcode::Jump) {
    if (term.successors[0].label == next) {
      // Redundant jump to the block laid out immediately afterwards.
      bool shares_row = false;
      for (size_t i = 0; i + 1 < b.ops.size(); ++i)
        shares_row |= sol.ops[i].t == sol.t_control;
      rows.drop_last = !shares_row;
      if (shares_row) rows.body_rows = sol.t_control + 1;
      if (rows.drop_last) rows.body_rows = sol.t_control;
    }
  } else if (is_flag_branch(term.opcode)) {
    if (term.successors[1].label != next) {
      rows.extra_jump = true;
      rows.extra_target = term.successors[1].label;
    }
  }
  return rows;
}

}  // namespace

const char* machine_op_name(MachineOp op) {
  switch (op) {
    case MachineOp::Nop: return "nop";
    case MachineOp::Const: return "const";
    case MachineOp::Add: return "add";
    case MachineOp::Sub: return "sub";
    case MachineOp::Mul: return "mul";
    case MachineOp::Load: return "load";
    case MachineOp::Store: return "store";
    case MachineOp::SetFlags: return "setflags";
    case MachineOp::Fsel: return "fsel";
    case MachineOp::Fzsel: return "fzsel";
    case MachineOp::Jump: return "jump";
    case MachineOp::Bge: return "bge";
    case MachineOp::Blt: return "blt";
    case MachineOp::Beq: return "beq";
    case MachineOp::Bne: return "bne";
  }
  return "?";
}

bool is_control(MachineOp op) {
  return op == MachineOp::Jump || op == MachineOp::Bge || op == MachineOp::Blt ||
         op == MachineOp::Beq || op == MachineOp::Bne;
}

RowLayout compute_layout(const CdfgFunction& f, const MappingSolution& solution) {
  RowLayout layout;
  int row = 0;
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const auto& sol = solution.blocks.at(f.blocks[bi].label);
    BlockRows rows = analyze_block_rows(f, bi, sol);
    layout.start[f.blocks[bi].label] = row;
    row += rows.body_rows + (rows.extra_jump ? 1 : 0);
  }
  layout.total_rows = row;
  return layout;
}

RegisterAssignment allocate_registers(const CdfgFunction& f,
                                      const MappingSolution& solution,
                                      const ArchConfig& arch,
                                      LiveValueTable& table,
                                      const LivenessSets& live) {
  RowLayout layout = compute_layout(f, solution);
  RegisterAssignment regs;

  // Collect per-class global-row live ranges of internal values.
  struct ClassInfo {
    int pe = -1;
    std::set<int> rows;
    std::vector<ValueId> members;
    long long span = 0;
  };
  std::map<int, ClassInfo> classes;
  for (const auto& row : table.rows()) {
    if (row.reg_class != RegClass::Internal) continue;
    auto& ci = classes[row.class_id];
    ci.pe = row.producer_pe;
    ci.members.push_back(row.value);
  }
  if (classes.empty()) return regs;

  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const BasicBlock& b = f.blocks[bi];
    const auto& sol = solution.blocks.at(b.label);
    int start = layout.start.at(b.label);
    int end = start + sol.t_control;  // last row the block can touch
    for (auto& [cid, ci] : classes) {
      for (ValueId v : ci.members) {
        bool in = live.in[bi].count(v) || [&] {
          for (const auto& p : b.params)
            if (p.value == v) return true;
          return false;
        }();
        bool out = live.out[bi].count(v) != 0;
        int def_row = -1, last_use = -1;
        for (size_t i = 0; i < b.ops.size(); ++i) {
          if (b.ops[i].result && *b.ops[i].result == v)
            def_row = start + sol.ops[i].t;
          for (const auto& o : b.ops[i].operands)
            if (o.is_value() && o.value == v)
              last_use = std::max(last_use, start + sol.ops[i].t);
        }
        int from = in ? start : def_row;
        if (from < 0) continue;
        int to = out ? end : std::max(last_use, from);
        for (int r = from; r <= to; ++r) ci.rows.insert(r);
      }
      ci.span = static_cast<long long>(ci.rows.size());
    }
  }

  // Greedy coloring per PE, longest live range first.
  std::map<int, std::vector<int>> by_pe;
  for (auto& [cid, ci] : classes)
    if (ci.pe >= 0 && !ci.rows.empty()) by_pe[ci.pe].push_back(cid);
  for (auto& [pe, list] : by_pe) {
    std::sort(list.begin(), list.end(), [&](int a, int b) {
      if (classes[a].span != classes[b].span)
        return classes[a].span > classes[b].span;
      return a < b;
    });
    std::map<int, std::set<int>> slot_rows;  // slot -> occupied rows
    for (int cid : list) {
      ClassInfo& ci = classes[cid];
      int chosen = -1;
      for (int s = 0; s < arch.regs && chosen < 0; ++s) {
        bool clash = false;
        for (int r : ci.rows)
          if (slot_rows[s].count(r)) {
            clash = true;
            break;
          }
        if (!clash) chosen = s;
      }
      if (chosen < 0)
        throw RegisterPressure("PE " + std::to_string(pe) +
                                   " needs more than " +
                                   std::to_string(arch.regs) +
                                   " internal registers",
                               ci.members.front());
      slot_rows[chosen].insert(ci.rows.begin(), ci.rows.end());
      for (ValueId v : ci.members) {
        regs.slot_of[v] = chosen;
        table.set_reg_index(v, chosen);
      }
      regs.slots_used_per_pe[pe] =
          std::max(regs.slots_used_per_pe[pe], chosen + 1);
    }
  }
  return regs;
}

AsmProgram emit_assembly(const CdfgFunction& f, MappingSolution& solution,
                         const RegisterAssignment& regs, const ArchConfig& arch,
                         const LiveValueTable& table, const LivenessSets& live) {
  RowLayout layout = compute_layout(f, solution);
  AsmProgram prog;
  prog.rows = layout.total_rows;
  prog.npes = arch.num_pes();
  prog.mesh_cols = arch.cols;
  prog.grid.assign(prog.rows * prog.npes, MInstr{});
  prog.block_index = layout.start;
  prog.entry_row = 0;

  // Where each value can be read from: producing op placements for
  // intra-block values, the class home for table values.
  auto src_for = [&](const BasicBlock& b, const BlockSolution& sol,
                     const Operand& x, int reader_pe) -> MInstr::Src {
    MInstr::Src src;
    if (x.is_imm()) {
      src.kind = MInstr::Src::Kind::Imm;
      src.imm = x.imm;
      return src;
    }
    // Same-block producer goes through Rout.
    int producer_pe = -1;
    for (size_t i = 0; i < b.ops.size(); ++i)
      if (b.ops[i].result && *b.ops[i].result == x.value)
        producer_pe = sol.ops[i].pe;
    if (producer_pe < 0) {
      if (!table.contains(x.value))
        throw BackendError("operand %" + std::to_string(x.value) +
                           " has no readable home");
      if (table.reg_class(x.value) == RegClass::Internal) {
        src.kind = MInstr::Src::Kind::Slot;
        src.slot = table.entry(x.value).reg_index;
        if (src.slot < 0)
          throw BackendError("internal value %" + std::to_string(x.value) +
                             " has no slot");
        return src;
      }
      producer_pe = table.producer_pe(x.value);
    }
    if (producer_pe == reader_pe) {
      src.kind = MInstr::Src::Kind::RoutSelf;
      return src;
    }
    int rr = reader_pe / arch.cols, rc = reader_pe % arch.cols;
    int pr = producer_pe / arch.cols, pc = producer_pe % arch.cols;
    auto wrap = [&](int d, int n) { return ((d % n) + n) % n; };
    if (arch.torus) {
      if (wrap(rr - 1, arch.rows) == pr && rc == pc)
        src.kind = MInstr::Src::Kind::NTop;
      else if (wrap(rr + 1, arch.rows) == pr && rc == pc)
        src.kind = MInstr::Src::Kind::NBottom;
      else if (wrap(rc - 1, arch.cols) == pc && rr == pr)
        src.kind = MInstr::Src::Kind::NLeft;
      else if (wrap(rc + 1, arch.cols) == pc && rr == pr)
        src.kind = MInstr::Src::Kind::NRight;
      else
        throw BackendError("producer PE not adjacent to reader");
    } else {
      if (pr == rr - 1 && pc == rc)
        src.kind = MInstr::Src::Kind::NTop;
      else if (pr == rr + 1 && pc == rc)
        src.kind = MInstr::Src::Kind::NBottom;
      else if (pr == rr && pc == rc - 1)
        src.kind = MInstr::Src::Kind::NLeft;
      else if (pr == rr && pc == rc + 1)
        src.kind = MInstr::Src::Kind::NRight;
      else
        throw BackendError("producer PE not adjacent to reader");
    }
    return src;
  };

  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const BasicBlock& b = f.blocks[bi];
    BlockSolution& sol = solution.blocks.at(b.label);
    BlockRows rows = analyze_block_rows(f, bi, sol);
    int start = layout.start.at(b.label);
    solution.t_init[b.label] = start;

    for (size_t i = 0; i < b.ops.size(); ++i) {
      const Operation& op = b.ops[i];
      bool is_term = i + 1 == b.ops.size();
      if (is_term && rows.drop_last) break;  // elided fallthrough jump
      int row = start + sol.ops[i].t;
      int pe = sol.ops[i].pe;
      MInstr& cell = prog.at(row, pe);
      if (cell.op != MachineOp::Nop)
        throw BackendError("row conflict at r" + std::to_string(row) + ".pe" +
                           std::to_string(pe));
      MInstr instr;
      if (op.opcode == Opcode::Ret) {
        instr.op = MachineOp::Jump;
        instr.target = row;  // halt: jump-to-self
      } else {
        instr.op = machine_op(op.opcode);
        bool has_flag = op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
                        is_flag_branch(op.opcode);
        std::vector<MInstr::Src> srcs;
        for (size_t k = has_flag ? 1 : 0; k < op.operands.size(); ++k)
          srcs.push_back(src_for(b, sol, op.operands[k], pe));
        if (srcs.size() > 0) instr.a = srcs[0];
        if (srcs.size() > 1) instr.b = srcs[1];
        if (is_flag_branch(op.opcode)) {
          instr.target = -2;  // patched below once all starts are known
        } else if (op.opcode == Opcode::Jump) {
          instr.target = -3;
        }
        if (op.result && machine_writes_rout(instr.op)) {
          auto it = regs.slot_of.find(*op.result);
          if (it != regs.slot_of.end()) {
            instr.dest = MInstr::Dest::Slot;
            instr.dest_slot = it->second;
          }
        }
      }
      cell = instr;
    }
    // Patch control targets.
    const Operation& term = b.terminator();
    if (!rows.drop_last) {
      int row = start + sol.t_control;
      int pe = sol.ops.back().pe;
      MInstr& cell = prog.at(row, pe);
      if (term.opcode == Opcode::Jump) {
        cell.target = layout.start.at(term.successors[0].label);
      } else if (is_flag_branch(term.opcode)) {
        cell.target = layout.start.at(term.successors[0].label);
      }
    }
    if (rows.extra_jump) {
      int row = start + rows.body_rows;  // the appended fallthrough row
      MInstr jump;
      jump.op = MachineOp::Jump;
      jump.target = layout.start.at(rows.extra_target);
      prog.at(row, 0) = jump;
    }
  }

  // Sanity: one control op per row, all targets valid.
  std::set<int> starts;
  for (const auto& [label, row] : prog.block_index) starts.insert(row);
  for (int r = 0; r < prog.rows; ++r) {
    int controls = 0;
    for (int p = 0; p < prog.npes; ++p) {
      const MInstr& in = prog.at(r, p);
      if (is_control(in.op)) {
        ++controls;
        if (in.target < 0 || in.target > prog.rows)
          throw BackendError("unresolved branch target at row " +
                             std::to_string(r));
      }
    }
    if (controls > 1)
      throw BackendError("two control ops in row " + std::to_string(r));
  }
  return prog;
}

std::string print_assembly(const AsmProgram& prog) {
  std::ostringstream os;
  std::map<int, std::string> labels;
  for (const auto& [label, row] : prog.block_index) labels[row] = label;
  auto src_text = [&](const MInstr::Src& s) -> std::string {
    switch (s.kind) {
      case MInstr::Src::Kind::None: return "-";
      case MInstr::Src::Kind::Imm: return std::to_string(s.imm);
      case MInstr::Src::Kind::RoutSelf: return "rout";
      case MInstr::Src::Kind::Slot: return "s" + std::to_string(s.slot);
      case MInstr::Src::Kind::NTop: return "T";
      case MInstr::Src::Kind::NBottom: return "B";
      case MInstr::Src::Kind::NLeft: return "L";
      case MInstr::Src::Kind::NRight: return "R";
    }
    return "?";
  };
  for (int r = 0; r < prog.rows; ++r) {
    auto it = labels.find(r);
    if (it != labels.end()) os << "; " << it->second << "\n";
    for (int p = 0; p < prog.npes; ++p) {
      const MInstr& in = prog.at(r, p);
      os << "r" << r << ".pe" << p << ": " << machine_op_name(in.op);
      if (in.op == MachineOp::Nop) {
        os << "\n";
        continue;
      }
      os << " ";
      if (machine_writes_rout(in.op))
        os << (in.dest == MInstr::Dest::Slot ? "s" + std::to_string(in.dest_slot)
                                             : std::string("rout"));
      else
        os << "-";
      os << ", " << src_text(in.a) << ", " << src_text(in.b);
      if (is_control(in.op)) os << " -> r" << in.target;
      os << "\n";
    }
  }
  return os.str();
}

namespace {

constexpr Word kImmMin = -(1 << 11);
constexpr Word kImmMax = (1 << 11) - 1;

uint32_t encode_src(const MInstr::Src& s) {
  return (static_cast<uint32_t>(s.kind) << 3) |
         (s.kind == MInstr::Src::Kind::Slot ? (s.slot & 7) : 0);
}

MInstr::Src decode_src(uint32_t bits, Word imm, bool* imm_used) {
  MInstr::Src s;
  s.kind = static_cast<MInstr::Src::Kind>((bits >> 3) & 7);
  if (s.kind == MInstr::Src::Kind::Slot) s.slot = static_cast<int>(bits & 7);
  if (s.kind == MInstr::Src::Kind::Imm) {
    s.imm = imm;
    *imm_used = true;
  }
  return s;
}

}  // namespace

std::vector<uint8_t> encode_binary(const AsmProgram& prog) {
  std::vector<uint8_t> bytes;
  bytes.reserve(prog.grid.size() * 4);
  for (const MInstr& in : prog.grid) {
    Word imm = 0;
    int imm_count = 0;
    if (in.a.kind == MInstr::Src::Kind::Imm) {
      imm = in.a.imm;
      ++imm_count;
    }
    if (in.b.kind == MInstr::Src::Kind::Imm) {
      imm = in.b.imm;
      ++imm_count;
    }
    if (imm_count > 1)
      throw BackendError("instruction with two immediate operands");
    if (is_control(in.op)) imm = static_cast<Word>(in.target);
    if (imm < kImmMin || imm > kImmMax)
      throw BackendError("immediate or target exceeds the 12-bit field: " +
                         std::to_string(imm));
    uint32_t word = 0;
    word |= static_cast<uint32_t>(in.op) << 28;
    uint32_t dest = (in.dest == MInstr::Dest::Slot ? 8u : 0u) |
                    (in.dest == MInstr::Dest::Slot ? (in.dest_slot & 7) : 0);
    word |= dest << 24;
    word |= encode_src(in.a) << 18;
    word |= encode_src(in.b) << 12;
    word |= static_cast<uint32_t>(imm) & 0xFFF;
    bytes.push_back(word & 0xFF);
    bytes.push_back((word >> 8) & 0xFF);
    bytes.push_back((word >> 16) & 0xFF);
    bytes.push_back((word >> 24) & 0xFF);
  }
  return bytes;
}

AsmProgram decode_binary(const std::vector<uint8_t>& bytes,
                         const ArchConfig& arch) {
  if (bytes.size() % 4 != 0)
    throw BackendError("binary image is not word aligned");
  size_t words = bytes.size() / 4;
  AsmProgram prog;
  prog.npes = arch.num_pes();
  prog.mesh_cols = arch.cols;
  if (words % prog.npes != 0)
    throw BackendError("binary image does not tile the mesh");
  prog.rows = static_cast<int>(words / prog.npes);
  prog.grid.resize(words);
  for (size_t i = 0; i < words; ++i) {
    uint32_t word = bytes[4 * i] | (bytes[4 * i + 1] << 8) |
                    (bytes[4 * i + 2] << 16) |
                    (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
    MInstr in;
    in.op = static_cast<MachineOp>(word >> 28);
    uint32_t dest = (word >> 24) & 0xF;
    if (dest & 8) {
      in.dest = MInstr::Dest::Slot;
      in.dest_slot = static_cast<int>(dest & 7);
    }
    Word imm = static_cast<Word>(word & 0xFFF);
    if (imm & 0x800) imm |= ~0xFFF;  // sign extend
    bool used = false;
    in.a = decode_src((word >> 18) & 0x3F, imm, &used);
    in.b = decode_src((word >> 12) & 0x3F, imm, &used);
    if (is_control(in.op)) in.target = imm;
    prog.grid[i] = in;
  }
  return prog;
}

}  // namespace cgraflow

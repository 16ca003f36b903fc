#include "cgraflow/sim.hpp"

#include <algorithm>
#include <sstream>

namespace cgraflow {

namespace {

struct PeState {
  Word rout = 0;
  std::vector<Word> slots;
  bool zero = false;
  bool sign = false;
};

bool sets_flags(MachineOp op) {
  switch (op) {
    case MachineOp::Const:
    case MachineOp::Add:
    case MachineOp::Sub:
    case MachineOp::Mul:
    case MachineOp::SetFlags:
    case MachineOp::Fsel:
    case MachineOp::Fzsel:
      return true;
    default:
      return false;
  }
}

}  // namespace

SimResult run_program(const AsmProgram& prog, const ArchConfig& arch,
                      Memory memory, const SimOptions& opts) {
  if (prog.npes != arch.num_pes())
    throw SimError("program mesh does not match the architecture");
  SimResult result;
  std::vector<PeState> pes(prog.npes);
  for (auto& pe : pes) pe.slots.assign(std::max(arch.regs, 1), 0);
  std::vector<long long> busy(prog.npes, 0);

  int rows = prog.rows;
  int cols = arch.cols;
  auto neighbor = [&](int pe, MInstr::Src::Kind kind) {
    int r = pe / cols, c = pe % cols;
    switch (kind) {
      case MInstr::Src::Kind::NTop: r -= 1; break;
      case MInstr::Src::Kind::NBottom: r += 1; break;
      case MInstr::Src::Kind::NLeft: c -= 1; break;
      case MInstr::Src::Kind::NRight: c += 1; break;
      default: break;
    }
    if (arch.torus) {
      r = (r + arch.rows) % arch.rows;
      c = (c + cols) % cols;
    } else if (r < 0 || r >= arch.rows || c < 0 || c >= cols) {
      throw SimError("neighbor read off the mesh edge");
    }
    return r * cols + c;
  };

  int pc = prog.entry_row;
  long long cycle = 0;
  while (true) {
    if (pc < 0 || pc >= rows) throw SimError("PC left the program");
    if (cycle >= opts.max_cycles)
      throw SimError("max cycles exceeded without halting");

    // All reads in a cycle observe end-of-previous-cycle state.
    const std::vector<PeState> prev = pes;
    auto read_src = [&](int pe, const MInstr::Src& s) -> Word {
      switch (s.kind) {
        case MInstr::Src::Kind::None: return 0;
        case MInstr::Src::Kind::Imm: return s.imm;
        case MInstr::Src::Kind::RoutSelf: return prev[pe].rout;
        case MInstr::Src::Kind::Slot: return prev[pe].slots[s.slot];
        default: return prev[neighbor(pe, s.kind)].rout;
      }
    };

    int next_pc = pc + 1;
    bool halted = false;
    int controls = 0;
    int stores = 0;
    std::ostringstream trace_line;
    if (opts.trace) trace_line << "cyc=" << cycle << " pc=" << pc;

    for (int pe = 0; pe < prog.npes; ++pe) {
      const MInstr& in = prog.at(pc, pe);
      if (in.op != MachineOp::Nop) ++busy[pe];
      Word a = read_src(pe, in.a);
      Word b = read_src(pe, in.b);
      Word value = 0;
      bool writes = true;
      switch (in.op) {
        case MachineOp::Nop: writes = false; break;
        case MachineOp::Const: value = a; break;
        case MachineOp::Add: value = wrap_add(a, b); break;
        case MachineOp::Sub:
        case MachineOp::SetFlags: value = wrap_sub(a, b); break;
        case MachineOp::Mul: value = wrap_mul(a, b); break;
        case MachineOp::Load: {
          uint32_t addr = static_cast<uint32_t>(a);
          if (!memory.valid(addr))
            throw SimError("load fault at address " + std::to_string(addr) +
                           ", row " + std::to_string(pc));
          value = memory.load(addr);
          break;
        }
        case MachineOp::Store: {
          uint32_t addr = static_cast<uint32_t>(b);
          if (!memory.valid(addr))
            throw SimError("store fault at address " + std::to_string(addr) +
                           ", row " + std::to_string(pc));
          if (++stores > 1) throw SimError("two stores in one cycle");
          memory.store(addr, a);
          writes = false;
          break;
        }
        case MachineOp::Fsel: value = prev[pe].sign ? a : b; break;
        case MachineOp::Fzsel: value = prev[pe].zero ? a : b; break;
        case MachineOp::Jump:
        case MachineOp::Bge:
        case MachineOp::Blt:
        case MachineOp::Beq:
        case MachineOp::Bne: {
          writes = false;
          if (++controls > 1)
            throw SimError("two control ops in row " + std::to_string(pc));
          bool taken = false;
          switch (in.op) {
            case MachineOp::Jump: taken = true; break;
            case MachineOp::Bge: taken = !prev[pe].sign; break;
            case MachineOp::Blt: taken = prev[pe].sign; break;
            case MachineOp::Beq: taken = prev[pe].zero; break;
            case MachineOp::Bne: taken = !prev[pe].zero; break;
            default: break;
          }
          if (taken) {
            if (in.op == MachineOp::Jump && in.target == pc)
              halted = true;
            else
              next_pc = in.target;
          }
          break;
        }
      }
      if (writes) {
        pes[pe].rout = value;
        if (in.dest == MInstr::Dest::Slot) pes[pe].slots[in.dest_slot] = value;
        if (sets_flags(in.op)) {
          pes[pe].zero = value == 0;
          pes[pe].sign = value < 0;
        }
        if (opts.trace)
          trace_line << " pe" << pe << ":" << machine_op_name(in.op) << "="
                     << value;
      } else if (opts.trace && in.op != MachineOp::Nop) {
        trace_line << " pe" << pe << ":" << machine_op_name(in.op);
      }
    }

    ++cycle;
    if (opts.trace) result.trace.push_back(trace_line.str());
    if (halted) {
      result.halted = true;
      break;
    }
    pc = next_pc;
  }

  result.cycles = cycle;
  result.memory = std::move(memory);
  result.utilization.resize(prog.npes);
  for (int pe = 0; pe < prog.npes; ++pe)
    result.utilization[pe] =
        cycle ? static_cast<double>(busy[pe]) / static_cast<double>(cycle) : 0.0;
  return result;
}

OracleVerdict compare_with_oracle(const CdfgFunction& f, const AsmProgram& prog,
                                  const ArchConfig& arch,
                                  const DataLayout& layout,
                                  const Memory& initial,
                                  const SimOptions& opts) {
  OracleVerdict verdict;
  try {
    verdict.interp = interpret(f, initial, bind_args(f, layout, initial));
  } catch (const std::exception& e) {
    verdict.detail = std::string("interpreter fault: ") + e.what();
    return verdict;
  }
  try {
    verdict.sim = run_program(prog, arch, initial, opts);
  } catch (const std::exception& e) {
    verdict.detail = std::string("simulator fault: ") + e.what();
    return verdict;
  }
  for (const Binding& b : layout.bindings()) {
    for (uint32_t addr = b.base; addr < b.base + b.extent; addr += 4) {
      Word want = verdict.interp.memory.load(addr);
      Word got = verdict.sim.memory.load(addr);
      if (want != got) {
        verdict.detail = "mismatch in " + b.name + " at address " +
                         std::to_string(addr) + ": interpreter " +
                         std::to_string(want) + ", simulator " +
                         std::to_string(got);
        return verdict;
      }
    }
  }
  verdict.equal = true;
  return verdict;
}

}  // namespace cgraflow

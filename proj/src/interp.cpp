#include "cgraflow/interp.hpp"

#include <unordered_map>

namespace cgraflow {

namespace {

struct Frame {
  std::unordered_map<ValueId, Word> env;

  Word get(const Operand& o) const {
    if (o.is_imm()) return o.imm;
    auto it = env.find(o.value);
    if (it == env.end())
      throw InterpError("read of unbound value %" + std::to_string(o.value));
    return it->second;
  }
};

uint32_t as_addr(Word w) { return static_cast<uint32_t>(w); }

}  // namespace

InterpResult interpret(const CdfgFunction& f, Memory memory,
                       const std::map<ValueId, Word>& args,
                       uint64_t max_steps) {
  Frame frame;
  for (const auto& a : f.args) {
    auto it = args.find(a.value);
    if (it == args.end())
      throw InterpError("missing binding for argument %" +
                        std::to_string(a.value));
    frame.env[a.value] = it->second;
  }

  InterpResult result;
  const BasicBlock* block = &f.blocks.front();
  uint64_t steps = 0;

  while (true) {
    for (const auto& op : block->ops) {
      if (++steps > max_steps)
        throw InterpError("step budget exceeded (possible non-termination)");
      ++result.ops_executed;
      auto set = [&](Word w) { frame.env[*op.result] = w; };
      switch (op.opcode) {
        case Opcode::Const:
          set(op.operands[0].imm);
          break;
        case Opcode::Add:
          set(wrap_add(frame.get(op.operands[0]), frame.get(op.operands[1])));
          break;
        case Opcode::Sub:
        case Opcode::SetFlags:
          set(wrap_sub(frame.get(op.operands[0]), frame.get(op.operands[1])));
          break;
        case Opcode::Mul:
          set(wrap_mul(frame.get(op.operands[0]), frame.get(op.operands[1])));
          break;
        case Opcode::Lt:
          set(wrap_sub(frame.get(op.operands[0]), frame.get(op.operands[1])) < 0
                  ? 1
                  : 0);
          break;
        case Opcode::Ge:
          set(wrap_sub(frame.get(op.operands[0]), frame.get(op.operands[1])) >= 0
                  ? 1
                  : 0);
          break;
        case Opcode::Eq:
          set(frame.get(op.operands[0]) == frame.get(op.operands[1]) ? 1 : 0);
          break;
        case Opcode::Ne:
          set(frame.get(op.operands[0]) != frame.get(op.operands[1]) ? 1 : 0);
          break;
        case Opcode::Select:
          set(frame.get(op.operands[0]) != 0 ? frame.get(op.operands[1])
                                             : frame.get(op.operands[2]));
          break;
        case Opcode::Fsel:
          set(frame.get(op.operands[0]) < 0 ? frame.get(op.operands[1])
                                            : frame.get(op.operands[2]));
          break;
        case Opcode::Fzsel:
          set(frame.get(op.operands[0]) == 0 ? frame.get(op.operands[1])
                                             : frame.get(op.operands[2]));
          break;
        case Opcode::Load: {
          uint32_t addr = as_addr(frame.get(op.operands[0]));
          if (!memory.valid(addr))
            throw InterpError("load fault at address " + std::to_string(addr));
          set(memory.load(addr));
          break;
        }
        case Opcode::Store: {
          uint32_t addr = as_addr(frame.get(op.operands[1]));
          if (!memory.valid(addr))
            throw InterpError("store fault at address " + std::to_string(addr));
          memory.store(addr, frame.get(op.operands[0]));
          break;
        }
        case Opcode::Ret: {
          if (!op.operands.empty()) result.ret = frame.get(op.operands[0]);
          result.memory = std::move(memory);
          return result;
        }
        case Opcode::Br:
        case Opcode::Jump:
        case Opcode::CondBr:
        case Opcode::Bge:
        case Opcode::Blt:
        case Opcode::Beq:
        case Opcode::Bne: {
          const SuccessorRef* target = nullptr;
          if (op.opcode == Opcode::Br || op.opcode == Opcode::Jump) {
            target = &op.successors[0];
          } else {
            Word c = frame.get(op.operands[0]);
            bool taken = false;
            switch (op.opcode) {
              case Opcode::CondBr: taken = (c != 0); break;
              case Opcode::Bge: taken = (c >= 0); break;
              case Opcode::Blt: taken = (c < 0); break;
              case Opcode::Beq: taken = (c == 0); break;
              case Opcode::Bne: taken = (c != 0); break;
              default: break;
            }
            target = taken ? &op.successors[0] : &op.successors[1];
          }
          const BasicBlock* next = f.find_block(target->label);
          std::vector<Word> vals;
          vals.reserve(target->args.size());
          for (const auto& a : target->args) vals.push_back(frame.get(a));
          for (size_t i = 0; i < next->params.size(); ++i)
            frame.env[next->params[i].value] = vals[i];
          block = next;
          break;
        }
      }
      if (is_terminator(op.opcode)) break;
    }
  }
}

std::map<ValueId, Word> bind_args(const CdfgFunction& f,
                                  const DataLayout& layout,
                                  const Memory& memory) {
  std::map<ValueId, Word> out;
  for (size_t i = 0; i < f.args.size(); ++i) {
    const auto& arg = f.args[i];
    std::string name = "arg" + std::to_string(i);
    const Binding* b = layout.find(name);
    if (!b)
      throw InterpError("no layout binding for " + name + " (%'" +
                        std::to_string(arg.value) + "')");
    if (arg.kind == ArgKind::Pointer)
      out[arg.value] = static_cast<Word>(b->base);
    else
      out[arg.value] = memory.load(b->base);
  }
  return out;
}

}  // namespace cgraflow

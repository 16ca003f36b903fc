#include "cgraflow/legalize.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace cgraflow {

namespace {

void replace_value_uses(CdfgFunction& f, ValueId v, const Operand& with) {
  for (auto& b : f.blocks)
    for (auto& op : b.ops) {
      for (auto& o : op.operands)
        if (o.is_value() && o.value == v) o = with;
      for (auto& s : op.successors)
        for (auto& a : s.args)
          if (a.is_value() && a.value == v) a = with;
    }
}

std::optional<Word> eval_compare(Opcode opc, Word a, Word b) {
  switch (opc) {
    case Opcode::Lt: return wrap_sub(a, b) < 0 ? 1 : 0;
    case Opcode::Ge: return wrap_sub(a, b) >= 0 ? 1 : 0;
    case Opcode::Eq: return a == b ? 1 : 0;
    case Opcode::Ne: return a != b ? 1 : 0;
    default: return std::nullopt;
  }
}

// Very small folding: compares with two immediates or identical operands,
// selects with a known condition, condbr on a constant.
void fold_trivial(CdfgFunction& f) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (auto& b : f.blocks) {
      for (auto& op : b.ops) {
        if (is_compare(op.opcode)) {
          std::optional<Word> folded;
          const Operand& x = op.operands[0];
          const Operand& y = op.operands[1];
          if (x.is_imm() && y.is_imm())
            folded = eval_compare(op.opcode, x.imm, y.imm);
          else if (x.is_value() && y.is_value() && x.value == y.value)
            folded = eval_compare(op.opcode, 0, 0);
          if (folded) {
            replace_value_uses(f, *op.result, Operand::immediate(*folded));
            op.opcode = Opcode::Const;
            op.operands = {Operand::immediate(*folded)};
            changed = true;
          }
        } else if (op.opcode == Opcode::Select && op.operands[0].is_imm()) {
          Operand chosen =
              op.operands[0].imm != 0 ? op.operands[1] : op.operands[2];
          replace_value_uses(f, *op.result, chosen);
          // Now-dead stand-in; the sweep below removes it.
          op.opcode = Opcode::Const;
          op.operands = {Operand::immediate(0)};
          changed = true;
        }
      }
      Operation& term = b.ops.back();
      if (term.opcode == Opcode::CondBr && term.operands[0].is_imm()) {
        SuccessorRef target =
            term.operands[0].imm != 0 ? term.successors[0] : term.successors[1];
        term.opcode = Opcode::Br;
        term.operands.clear();
        term.successors = {std::move(target)};
        changed = true;
      }
    }
    if (changed) {
      remove_unreachable_blocks(f);
      remove_dead_pure_ops(f);
    }
  }
}

struct CompareDef {
  Opcode opcode;
  Operand lhs;
  Operand rhs;
};

std::unordered_map<ValueId, CompareDef> collect_compares(const CdfgFunction& f) {
  std::unordered_map<ValueId, CompareDef> out;
  for (const auto& b : f.blocks)
    for (const auto& op : b.ops)
      if (is_compare(op.opcode))
        out[*op.result] = CompareDef{op.opcode, op.operands[0], op.operands[1]};
  return out;
}

Opcode branch_for_compare(Opcode cmp) {
  switch (cmp) {
    case Opcode::Lt: return Opcode::Blt;
    case Opcode::Ge: return Opcode::Bge;
    case Opcode::Eq: return Opcode::Beq;
    case Opcode::Ne: return Opcode::Bne;
    default: return Opcode::Bne;
  }
}

}  // namespace

void lower_memory(CdfgFunction& f, const DataLayout& layout) {
  // Reject address arithmetic over two pointer arguments; the stride/base
  // split needs a single statically known base per access.
  std::unordered_set<ValueId> pointer_args;
  for (const auto& a : f.args)
    if (a.kind == ArgKind::Pointer) pointer_args.insert(a.value);
  for (const auto& b : f.blocks)
    for (const auto& op : b.ops) {
      int ptr_operands = 0;
      for (const auto& o : op.operands)
        if (o.is_value() && pointer_args.count(o.value)) ++ptr_operands;
      if (ptr_operands > 1)
        throw LegalizeError("address arithmetic mixes pointer arguments in " +
                            b.label);
    }

  std::vector<Operation> preloads;
  ValueId next_id = f.next_value_id();
  for (size_t i = 0; i < f.args.size(); ++i) {
    const FuncArg& arg = f.args[i];
    const std::string name = "arg" + std::to_string(i);
    const Binding* bind = layout.find(name);
    if (arg.kind == ArgKind::Pointer) {
      if (!bind) throw LegalizeError("unbound pointer argument " + name);
      replace_value_uses(f, arg.value,
                         Operand::immediate(static_cast<Word>(bind->base)));
    } else {
      bool used = false;
      for (const auto& b : f.blocks)
        for (const auto& op : b.ops) {
          for (const auto& o : op.operands)
            used |= o.is_value() && o.value == arg.value;
          for (const auto& s : op.successors)
            for (const auto& a : s.args)
              used |= a.is_value() && a.value == arg.value;
        }
      if (!used) continue;
      if (!bind) throw LegalizeError("unbound scalar argument " + name);
      Operation load;
      load.opcode = Opcode::Load;
      load.result = next_id++;
      load.operands = {Operand::immediate(static_cast<Word>(bind->base))};
      replace_value_uses(f, arg.value, Operand::val(*load.result));
      preloads.push_back(std::move(load));
    }
  }
  BasicBlock& entry = f.blocks.front();
  entry.ops.insert(entry.ops.begin(), preloads.begin(), preloads.end());
  // Every reference is grounded now; the signature is closed.
  f.args.clear();
}

void lower_flags_and_branches(CdfgFunction& f) {
  fold_trivial(f);
  auto compares = collect_compares(f);
  ValueId next_id = f.next_value_id();

  // setflags feeding the rewritten consumer, inserted right before it.
  auto make_setflags = [&](const Operand& cond) {
    Operation sf;
    sf.opcode = Opcode::SetFlags;
    sf.result = next_id++;
    auto it = cond.is_value() ? compares.find(cond.value) : compares.end();
    if (it != compares.end())
      sf.operands = {it->second.lhs, it->second.rhs};
    else
      sf.operands = {cond, Operand::immediate(0)};
    return sf;
  };

  for (auto& b : f.blocks) {
    std::vector<Operation> out;
    out.reserve(b.ops.size() + 4);
    for (auto& op : b.ops) {
      if (op.opcode == Opcode::Select) {
        Operand cond = op.operands[0];
        Operation sf = make_setflags(cond);
        ValueId flags = *sf.result;
        out.push_back(std::move(sf));
        auto it = cond.is_value() ? compares.find(cond.value) : compares.end();
        Opcode cmp = it != compares.end() ? it->second.opcode : Opcode::Ne;
        Operation sel;
        sel.result = op.result;
        Operand a = op.operands[1], bnd = op.operands[2];
        switch (cmp) {
          case Opcode::Lt:
            sel.opcode = Opcode::Fsel;
            sel.operands = {Operand::val(flags), a, bnd};
            break;
          case Opcode::Ge:
            sel.opcode = Opcode::Fsel;
            sel.operands = {Operand::val(flags), bnd, a};
            break;
          case Opcode::Eq:
            sel.opcode = Opcode::Fzsel;
            sel.operands = {Operand::val(flags), a, bnd};
            break;
          default:  // Ne and the plain-value fallback agree: zero means false
            sel.opcode = Opcode::Fzsel;
            sel.operands = {Operand::val(flags), bnd, a};
            break;
        }
        out.push_back(std::move(sel));
      } else if (op.opcode == Opcode::CondBr) {
        Operand cond = op.operands[0];
        Operation sf = make_setflags(cond);
        ValueId flags = *sf.result;
        out.push_back(std::move(sf));
        auto it = cond.is_value() ? compares.find(cond.value) : compares.end();
        Operation br;
        br.opcode = it != compares.end() ? branch_for_compare(it->second.opcode)
                                         : Opcode::Bne;
        br.operands = {Operand::val(flags)};
        br.successors = std::move(op.successors);
        out.push_back(std::move(br));
      } else if (op.opcode == Opcode::Br) {
        op.opcode = Opcode::Jump;
        out.push_back(std::move(op));
      } else {
        out.push_back(std::move(op));
      }
    }
    b.ops = std::move(out);
  }

  // Compares with remaining non-flag consumers become materialized booleans.
  for (auto& b : f.blocks) {
    std::vector<Operation> out;
    for (auto& op : b.ops) {
      if (!is_compare(op.opcode)) {
        out.push_back(std::move(op));
        continue;
      }
      bool used = false;
      for (const auto& bb : f.blocks)
        for (const auto& o2 : bb.ops) {
          for (const auto& o : o2.operands)
            used |= o.is_value() && o.value == *op.result;
          for (const auto& s : o2.successors)
            for (const auto& a : s.args)
              used |= a.is_value() && a.value == *op.result;
        }
      if (!used) continue;  // dead, dropped below anyway
      Operation sf;
      sf.opcode = Opcode::SetFlags;
      sf.result = next_id++;
      sf.operands = {op.operands[0], op.operands[1]};
      Operation one;
      one.opcode = Opcode::Const;
      one.result = next_id++;
      one.operands = {Operand::immediate(1)};
      Operation zero;
      zero.opcode = Opcode::Const;
      zero.result = next_id++;
      zero.operands = {Operand::immediate(0)};
      Operation sel;
      sel.result = op.result;
      Operand t = Operand::val(*one.result), z = Operand::val(*zero.result);
      switch (op.opcode) {
        case Opcode::Lt:
          sel.opcode = Opcode::Fsel;
          sel.operands = {Operand::val(*sf.result), t, z};
          break;
        case Opcode::Ge:
          sel.opcode = Opcode::Fsel;
          sel.operands = {Operand::val(*sf.result), z, t};
          break;
        case Opcode::Eq:
          sel.opcode = Opcode::Fzsel;
          sel.operands = {Operand::val(*sf.result), t, z};
          break;
        default:
          sel.opcode = Opcode::Fzsel;
          sel.operands = {Operand::val(*sf.result), z, t};
          break;
      }
      out.push_back(std::move(sf));
      out.push_back(std::move(one));
      out.push_back(std::move(zero));
      out.push_back(std::move(sel));
    }
    b.ops = std::move(out);
  }

  // Immediate branch arguments become consts so every block parameter has a
  // producing op the mapper can place.
  for (auto& b : f.blocks) {
    Operation& term = b.ops.back();
    std::vector<Operation> consts;
    for (auto& s : term.successors)
      for (auto& a : s.args) {
        if (!a.is_imm()) continue;
        Operation c;
        c.opcode = Opcode::Const;
        c.result = next_id++;
        c.operands = {a};
        a = Operand::val(*c.result);
        consts.push_back(std::move(c));
      }
    b.ops.insert(b.ops.end() - 1, consts.begin(), consts.end());
  }

  remove_dead_pure_ops(f);
}

namespace {

// Builds K from in-range pieces: K = materialize(q) * m + r with m a power
// of two below the immediate ceiling.
struct ImmBuilder {
  CdfgFunction& f;
  const ArchConfig& arch;
  ValueId next_id;
  std::vector<Operation> emitted;
  std::map<Word, ValueId> memo;  // per block

  ValueId build(Word k) {
    auto it = memo.find(k);
    if (it != memo.end()) return it->second;
    ValueId v;
    if (arch.in_imm_range(k)) {
      Operation c;
      c.opcode = Opcode::Const;
      c.result = next_id++;
      c.operands = {Operand::immediate(k)};
      v = *c.result;
      emitted.push_back(std::move(c));
    } else {
      long long m = 1ll << (arch.imm_width - 2);
      long long q = k / m, r = k % m;
      if (r < 0) {
        r += m;
        q -= 1;
      }
      ValueId qv = build(static_cast<Word>(q));
      Operation mul;
      mul.opcode = Opcode::Mul;
      mul.result = next_id++;
      mul.operands = {Operand::val(qv), Operand::immediate(static_cast<Word>(m))};
      ValueId cur = *mul.result;
      emitted.push_back(std::move(mul));
      if (r != 0) {
        Operation add;
        add.opcode = Opcode::Add;
        add.result = next_id++;
        add.operands = {Operand::val(cur),
                        Operand::immediate(static_cast<Word>(r))};
        cur = *add.result;
        emitted.push_back(std::move(add));
      }
      v = cur;
    }
    memo[k] = v;
    return v;
  }
};

int encoded_imm_count(const Operation& op) {
  int count = 0;
  size_t first = 0;
  // The flag operand of fsel/fzsel and predicate branches is implicit in the
  // encoding; it never occupies an immediate field.
  if (op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
      is_flag_branch(op.opcode))
    first = 1;
  for (size_t i = first; i < op.operands.size(); ++i)
    if (op.operands[i].is_imm()) ++count;
  return count;
}

}  // namespace

void legalize_immediates(CdfgFunction& f, const ArchConfig& arch) {
  ValueId next_id = f.next_value_id();
  for (auto& b : f.blocks) {
    ImmBuilder builder{f, arch, next_id, {}, {}};
    std::vector<Operation> out;
    for (auto& op : b.ops) {
      // Out-of-range const: keep the result id, replace the op by a fresh
      // construction sequence whose final producer takes over the id.
      if (op.opcode == Opcode::Const && !arch.in_imm_range(op.operands[0].imm)) {
        Word k = op.operands[0].imm;
        ImmBuilder cb{f, arch, builder.next_id, {}, {}};
        ValueId v = cb.build(k);
        builder.next_id = cb.next_id;
        cb.emitted.back().result = op.result;
        (void)v;
        builder.memo[k] = *op.result;
        for (auto& e : cb.emitted) out.push_back(std::move(e));
        continue;
      }
      builder.emitted.clear();
      for (auto& o : op.operands) {
        if (o.is_imm() && !arch.in_imm_range(o.imm))
          o = Operand::val(builder.build(o.imm));
      }
      for (auto& e : builder.emitted) out.push_back(std::move(e));
      out.push_back(std::move(op));
    }
    next_id = builder.next_id;
    b.ops = std::move(out);
  }

  // Fold or materialize so at most one immediate reaches the encoder.
  next_id = f.next_value_id();
  for (auto& b : f.blocks) {
    std::vector<Operation> out;
    for (auto& op : b.ops) {
      if (op.opcode != Opcode::Const && encoded_imm_count(op) > 1) {
        bool foldable = op.result && (op.opcode == Opcode::Add ||
                                      op.opcode == Opcode::Sub ||
                                      op.opcode == Opcode::Mul);
        if (foldable) {
          Word a = op.operands[0].imm, c = op.operands[1].imm;
          Word r = op.opcode == Opcode::Add   ? wrap_add(a, c)
                   : op.opcode == Opcode::Sub ? wrap_sub(a, c)
                                              : wrap_mul(a, c);
          op.opcode = Opcode::Const;
          op.operands = {Operand::immediate(r)};
          if (!arch.in_imm_range(r)) {
            ImmBuilder builder{f, arch, next_id, {}, {}};
            ValueId v = builder.build(r);
            next_id = builder.next_id;
            for (auto& e : builder.emitted) out.push_back(std::move(e));
            if (!out.empty() && out.back().result == v)
              out.back().result = op.result;
            continue;
          }
        } else {
          size_t first =
              (op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
               is_flag_branch(op.opcode))
                  ? 1
                  : 0;
          for (size_t i = first; i < op.operands.size(); ++i) {
            if (encoded_imm_count(op) <= 1) break;
            if (!op.operands[i].is_imm()) continue;
            Operation c;
            c.opcode = Opcode::Const;
            c.result = next_id++;
            c.operands = {op.operands[i]};
            op.operands[i] = Operand::val(*c.result);
            out.push_back(std::move(c));
          }
        }
      }
      out.push_back(std::move(op));
    }
    b.ops = std::move(out);
  }
}

Diagnostics check_legal(const CdfgFunction& f, const ArchConfig& arch) {
  Diagnostics diags;
  auto err = [&](const std::string& msg, const std::string& block) {
    diags.push_back(Diagnostic{msg, block, 0, 0});
  };
  for (const auto& b : f.blocks) {
    std::unordered_map<ValueId, size_t> setflags_at;
    for (size_t i = 0; i < b.ops.size(); ++i) {
      const Operation& op = b.ops[i];
      switch (op.opcode) {
        case Opcode::Lt:
        case Opcode::Ge:
        case Opcode::Eq:
        case Opcode::Ne:
        case Opcode::Select:
        case Opcode::Br:
        case Opcode::CondBr:
          err(std::string("opcode not in target ISA: ") + opcode_name(op.opcode),
              b.label);
          break;
        default:
          break;
      }
      if (op.opcode == Opcode::SetFlags) setflags_at[*op.result] = i;
      if (op.opcode == Opcode::Fsel || op.opcode == Opcode::Fzsel ||
          is_flag_branch(op.opcode)) {
        const Operand& flag = op.operands[0];
        auto it = flag.is_value() ? setflags_at.find(flag.value)
                                  : setflags_at.end();
        if (it == setflags_at.end() || it->second >= i)
          err("flag consumer without a preceding same-block setflags", b.label);
      }
      if (op.opcode == Opcode::Const) {
        if (!arch.in_imm_range(op.operands[0].imm))
          err("const immediate out of range", b.label);
      } else {
        for (const auto& o : op.operands)
          if (o.is_imm() && !arch.in_imm_range(o.imm))
            err("immediate out of range", b.label);
        if (encoded_imm_count(op) > 1)
          err("more than one immediate operand", b.label);
      }
      bool last = i + 1 == b.ops.size();
      if (is_terminator(op.opcode) != last)
        err("control op must be the single block terminator", b.label);
      if (last)
        for (const auto& s : op.successors)
          for (const auto& a : s.args)
            if (a.is_imm()) err("branch argument is an immediate", b.label);
    }
  }
  return diags;
}

void legalize_function(CdfgFunction& f, const DataLayout& layout,
                       const ArchConfig& arch) {
  lower_memory(f, layout);
  lower_flags_and_branches(f);
  legalize_immediates(f, arch);
  Diagnostics diags = verify(f);
  if (!diags.empty())
    throw LegalizeError("legalization broke the function:\n" +
                        diagnostics_to_string(diags));
  diags = check_legal(f, arch);
  if (!diags.empty())
    throw LegalizeError("function is not legal after lowering:\n" +
                        diagnostics_to_string(diags));
}

}  // namespace cgraflow

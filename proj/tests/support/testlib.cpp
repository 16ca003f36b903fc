#include "testlib.hpp"

#include <deque>
#include <functional>

#include "cgraflow/textio.hpp"

namespace cgraflow::test {

namespace {

struct Builder {
  CdfgFunction f;
  Rng& rng;
  ValueId next = 0;
  int label_counter = 0;

  explicit Builder(Rng& r) : rng(r) {}

  ValueId fresh() { return next++; }
  std::string fresh_label() { return "bb" + std::to_string(label_counter++); }
  int pick(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

  Operand pick_operand(const std::vector<ValueId>& avail) {
    if (pick(6) == 0)
      return Operand::immediate(std::uniform_int_distribution<int>(-9, 9)(rng));
    return Operand::val(avail[pick(static_cast<int>(avail.size()))]);
  }

  // Appends 0..max random pure ops; returns the available value set grown
  // with the results.
  void random_ops(BasicBlock& b, std::vector<ValueId>& avail, int max_ops) {
    static const Opcode pool[] = {Opcode::Add, Opcode::Sub, Opcode::Mul,
                                  Opcode::Lt,  Opcode::Ge,  Opcode::Eq,
                                  Opcode::Ne,  Opcode::Select};
    int n = pick(max_ops + 1);
    for (int i = 0; i < n; ++i) {
      Operation op;
      op.opcode = pool[pick(8)];
      op.result = fresh();
      int arity = op.opcode == Opcode::Select ? 3 : 2;
      for (int k = 0; k < arity; ++k) op.operands.push_back(pick_operand(avail));
      if (op.opcode == Opcode::Select && op.operands[0].is_imm())
        op.operands[0] = Operand::val(avail[pick(int(avail.size()))]);
      avail.push_back(*op.result);
      b.ops.push_back(std::move(op));
    }
  }

  std::vector<Operand> edge_args(const std::vector<ValueId>& avail, int k) {
    std::vector<Operand> args;
    for (int i = 0; i < k; ++i)
      args.push_back(Operand::val(avail[pick(static_cast<int>(avail.size()))]));
    return args;
  }
};

constexpr int kCarried = 3;

}  // namespace

CdfgFunction random_function(Rng& rng, const GenOptions& opts) {
  Builder b(rng);
  b.f.name = "gen";
  for (int i = 0; i < opts.num_inputs; ++i)
    b.f.args.push_back(FuncArg{b.fresh(), ArgKind::Scalar});

  // The function is a chain of segments; each carries kCarried values.
  std::vector<ValueId> avail;
  for (const auto& a : b.f.args) avail.push_back(a.value);

  BasicBlock cur;
  cur.label = b.fresh_label();
  int budget = opts.max_blocks - 1;

  auto new_block_with_params = [&](std::vector<ValueId>& avail_out) {
    BasicBlock nb;
    nb.label = b.fresh_label();
    avail_out.clear();
    for (int i = 0; i < kCarried; ++i) {
      ValueId v = b.fresh();
      nb.params.push_back(BlockParam{v});
      avail_out.push_back(v);
    }
    return nb;
  };

  while (budget > 0) {
    int shape = b.pick(opts.allow_loops ? 3 : 2);
    if (shape == 0 || budget < 3) {  // straight block
      b.random_ops(cur, avail, opts.max_ops_per_block);
      std::vector<ValueId> next_avail;
      BasicBlock nb = new_block_with_params(next_avail);
      Operation br;
      br.opcode = Opcode::Br;
      br.successors.push_back(SuccessorRef{nb.label, b.edge_args(avail, kCarried)});
      cur.ops.push_back(std::move(br));
      b.f.blocks.push_back(std::move(cur));
      cur = std::move(nb);
      avail = next_avail;
      budget -= 1;
    } else if (shape == 1) {  // diamond
      b.random_ops(cur, avail, opts.max_ops_per_block);
      Operation cmp;
      cmp.opcode = Opcode::Lt;
      cmp.result = b.fresh();
      cmp.operands = {b.pick_operand(avail), b.pick_operand(avail)};
      ValueId cond = *cmp.result;
      cur.ops.push_back(std::move(cmp));
      avail.push_back(cond);

      std::vector<ValueId> la, ra, ja;
      BasicBlock left = new_block_with_params(la);
      BasicBlock right = new_block_with_params(ra);
      BasicBlock join = new_block_with_params(ja);
      Operation cb;
      cb.opcode = Opcode::CondBr;
      cb.operands = {Operand::val(cond)};
      cb.successors.push_back(SuccessorRef{left.label, b.edge_args(avail, kCarried)});
      cb.successors.push_back(SuccessorRef{right.label, b.edge_args(avail, kCarried)});
      cur.ops.push_back(std::move(cb));
      b.f.blocks.push_back(std::move(cur));

      b.random_ops(left, la, opts.max_ops_per_block);
      Operation bl;
      bl.opcode = Opcode::Br;
      bl.successors.push_back(SuccessorRef{join.label, b.edge_args(la, kCarried)});
      left.ops.push_back(std::move(bl));
      b.f.blocks.push_back(std::move(left));

      b.random_ops(right, ra, opts.max_ops_per_block);
      Operation brr;
      brr.opcode = Opcode::Br;
      brr.successors.push_back(SuccessorRef{join.label, b.edge_args(ra, kCarried)});
      right.ops.push_back(std::move(brr));
      b.f.blocks.push_back(std::move(right));

      cur = std::move(join);
      avail = ja;
      budget -= 3;
    } else {  // bounded counter loop, frontend shape: head checks, body loops
      b.random_ops(cur, avail, opts.max_ops_per_block);
      int trip = 1 + b.pick(4);

      // head(params + counter)
      BasicBlock head;
      head.label = b.fresh_label();
      const std::string head_label = head.label;
      std::vector<ValueId> ha;
      for (int i = 0; i < kCarried; ++i) {
        ValueId v = b.fresh();
        head.params.push_back(BlockParam{v});
        ha.push_back(v);
      }
      ValueId counter = b.fresh();
      head.params.push_back(BlockParam{counter});

      Operation enter;
      enter.opcode = Opcode::Br;
      auto args = b.edge_args(avail, kCarried);
      args.push_back(Operand::immediate(0));
      enter.successors.push_back(SuccessorRef{head_label, std::move(args)});
      cur.ops.push_back(std::move(enter));
      b.f.blocks.push_back(std::move(cur));

      std::vector<ValueId> ba, xa;
      BasicBlock body = new_block_with_params(ba);
      ValueId body_counter = b.fresh();
      body.params.push_back(BlockParam{body_counter});
      BasicBlock next = new_block_with_params(xa);

      Operation cmp;
      cmp.opcode = Opcode::Lt;
      cmp.result = b.fresh();
      cmp.operands = {Operand::val(counter), Operand::immediate(trip)};
      ValueId loop_cond = *cmp.result;
      head.ops.push_back(std::move(cmp));
      Operation cb;
      cb.opcode = Opcode::CondBr;
      cb.operands = {Operand::val(loop_cond)};
      auto body_args = b.edge_args(ha, kCarried);
      body_args.push_back(Operand::val(counter));
      cb.successors.push_back(SuccessorRef{body.label, std::move(body_args)});
      cb.successors.push_back(SuccessorRef{next.label, b.edge_args(ha, kCarried)});
      head.ops.push_back(std::move(cb));
      b.f.blocks.push_back(std::move(head));

      b.random_ops(body, ba, opts.max_ops_per_block);
      Operation inc;
      inc.opcode = Opcode::Add;
      inc.result = b.fresh();
      inc.operands = {Operand::val(body_counter), Operand::immediate(1)};
      ValueId bumped = *inc.result;
      body.ops.push_back(std::move(inc));
      Operation back;
      back.opcode = Opcode::Br;
      auto back_args = b.edge_args(ba, kCarried);
      back_args.push_back(Operand::val(bumped));
      back.successors.push_back(SuccessorRef{head_label, std::move(back_args)});
      body.ops.push_back(std::move(back));
      b.f.blocks.push_back(std::move(body));

      cur = std::move(next);
      avail = xa;
      budget -= 3;
    }
  }

  b.random_ops(cur, avail, opts.max_ops_per_block);
  Operation ret;
  ret.opcode = Opcode::Ret;
  ret.operands.push_back(Operand::val(avail[b.pick(int(avail.size()))]));
  cur.ops.push_back(std::move(ret));
  b.f.blocks.push_back(std::move(cur));

  Diagnostics diags = verify(b.f);
  if (!diags.empty())
    throw std::runtime_error("generator produced invalid function:\n" +
                             diagnostics_to_string(diags) + print_function(b.f));
  return b.f;
}

std::map<ValueId, Word> random_args(const CdfgFunction& f, Rng& rng) {
  std::map<ValueId, Word> args;
  std::uniform_int_distribution<Word> dist(-50, 50);
  for (const auto& a : f.args) args[a.value] = dist(rng);
  return args;
}

void brute_force_liveness(const DataflowProblem& p,
                          std::vector<std::set<ValueId>>& in,
                          std::vector<std::set<ValueId>>& out) {
  size_t n = p.succ.size();
  in.assign(n, {});
  out.assign(n, {});
  std::set<ValueId> universe;
  for (const auto& s : p.use) universe.insert(s.begin(), s.end());
  for (const auto& s : p.def) universe.insert(s.begin(), s.end());

  // v is live-in at b iff a use of v is reachable from b's entry without
  // crossing a def of v first.
  auto live_in = [&](int b, ValueId v) {
    if (p.use[b].count(v)) return true;
    if (p.def[b].count(v)) return false;
    std::vector<bool> visited(n, false);
    std::deque<int> q;
    for (int s : p.succ[b]) q.push_back(s);
    while (!q.empty()) {
      int w = q.front();
      q.pop_front();
      if (visited[w]) continue;
      visited[w] = true;
      if (p.use[w].count(v)) return true;
      if (p.def[w].count(v)) continue;  // path is blocked here
      for (int s : p.succ[w]) q.push_back(s);
    }
    return false;
  };
  for (size_t b = 0; b < n; ++b)
    for (ValueId v : universe) {
      if (live_in(int(b), v)) in[b].insert(v);
      for (int s : p.succ[b])
        if (live_in(s, v)) out[b].insert(v);
    }
}

std::string fig5a_text() {
  return R"(func @ifbranch(%0: ptr, %1: ptr) {
bb0:
  %2 = load %0
  %3 = ge %2, 5
  condbr %3, bb1(), bb2()
bb1:
  %4 = add %2, 5
  br bb3(%4)
bb2:
  %5 = mul %2, 2
  br bb3(%5)
bb3(%6: i32):
  store %6, %1
  ret
}
)";
}

std::string fig5c_text() {
  return R"(func @nested(%0: ptr) {
bb0:
  br bb1(0, 0)
bb1(%1: i32, %2: i32):
  %3 = ge %1, 10
  condbr %3, bb4(%2), bb2(%1, %2, 0)
bb2(%4: i32, %5: i32, %6: i32):
  %7 = add %5, %4
  %8 = add %6, 1
  %9 = lt %8, 20
  condbr %9, bb2(%4, %7, %8), bb3(%4, %7)
bb3(%10: i32, %11: i32):
  %12 = add %10, 1
  br bb1(%12, %11)
bb4(%13: i32):
  store %13, %0
  ret
}
)";
}

std::string conv1d_like_text() {
  return R"(func @dotn(%0: ptr, %1: ptr, %2: ptr, %3: i32) {
bb0:
  br bb1(0, 0)
bb1(%4: i32, %5: i32):
  %6 = lt %4, %3
  condbr %6, bb2(%4, %5), bb3(%5)
bb2(%7: i32, %8: i32):
  %9 = mul %7, 4
  %10 = add %9, %0
  %11 = load %10
  %12 = add %9, %1
  %13 = load %12
  %14 = mul %11, %13
  %15 = add %8, %14
  %16 = add %7, 1
  br bb1(%16, %15)
bb3(%17: i32):
  store %17, %2
  ret
}
)";
}

InterpResult run_plain(const CdfgFunction& f, const std::map<ValueId, Word>& args,
                       uint32_t words) {
  return interpret(f, Memory(words * 4), args);
}

}  // namespace cgraflow::test

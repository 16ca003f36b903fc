#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cgraflow/legalize.hpp"
#include "cgraflow/textio.hpp"
#include "testlib.hpp"

using namespace cgraflow;

namespace {

DataLayout dot_layout() {
  DataLayout layout;
  layout.bind("arg0", 1000, 32);
  layout.bind("arg1", 1032, 32);
  layout.bind("arg2", 1064, 4);
  layout.bind("arg3", 1068, 4);
  return layout;
}

Memory dot_memory(test::Rng& rng, int n) {
  Memory mem(2048);
  std::uniform_int_distribution<Word> dist(-9, 9);
  for (uint32_t a = 1000; a < 1064; a += 4) mem.store(a, dist(rng));
  mem.store(1068, n);
  return mem;
}

}  // namespace

TEST_CASE("lower_memory rewrites an array access to mul/add/load at the base") {
  std::string text = R"(func @ld(%0: ptr, %1: i32) {
bb0:
  %2 = mul %1, 4
  %3 = add %2, %0
  %4 = load %3
  ret %4
}
)";
  CdfgFunction f = parse_function(text);
  DataLayout layout;
  layout.bind("arg0", 1000, 64);
  layout.bind("arg1", 1064, 4);
  lower_memory(f, layout);
  REQUIRE(verify_ok(f));
  std::string printed = print_function(f);
  CHECK(printed.find("add %2, 1000") != std::string::npos);
  // Scalar argument: a single load of the base address.
  CHECK(printed.find("load 1064") != std::string::npos);
}

TEST_CASE("lower_memory scalar deref is a bare base-address load") {
  CdfgFunction f =
      parse_function("func @s(%0: ptr) { bb0: %1 = load %0 ret %1 }");
  DataLayout layout;
  layout.bind("arg0", 2000, 4);
  lower_memory(f, layout);
  CHECK(print_function(f).find("load 2000") != std::string::npos);
}

TEST_CASE("lower_memory rejects unbound pointers and mixed bases") {
  CdfgFunction f =
      parse_function("func @u(%0: ptr) { bb0: %1 = load %0 ret %1 }");
  DataLayout empty;
  CHECK_THROWS_AS(lower_memory(f, empty), LegalizeError);

  CdfgFunction g = parse_function(
      "func @m(%0: ptr, %1: ptr) { bb0: %2 = add %0, %1 %3 = load %2 ret }");
  DataLayout layout;
  layout.bind("arg0", 0, 4);
  layout.bind("arg1", 4, 4);
  CHECK_THROWS_AS(lower_memory(g, layout), LegalizeError);
}

TEST_CASE("in-range immediates are untouched") {
  CdfgFunction f =
      parse_function("func @f(%0: i32) { bb0: %1 = add %0, 100 ret %1 }");
  ArchConfig arch;
  CdfgFunction before = f;
  legalize_immediates(f, arch);
  CHECK(f == before);
}

TEST_CASE("add with immediate 4096 is decomposed and stays equivalent") {
  CdfgFunction f =
      parse_function("func @f(%0: i32) { bb0: %1 = add %0, 4096 ret %1 }");
  ArchConfig arch;  // 12-bit: signed max 2047
  CdfgFunction orig = f;
  legalize_immediates(f, arch);
  REQUIRE(verify_ok(f));
  for (const auto& op : f.blocks[0].ops)
    for (const auto& o : op.operands)
      if (o.is_imm()) CHECK(arch.in_imm_range(o.imm));
  CHECK(f.blocks[0].ops.size() > orig.blocks[0].ops.size());
  for (Word x : {0, 5, -1234}) {
    auto r1 = test::run_plain(orig, {{0, x}});
    auto r2 = test::run_plain(f, {{0, x}});
    CHECK(*r1.ret == *r2.ret);
  }
}

TEST_CASE("huge constants are built from in-range pieces") {
  for (Word k : {2000000, -2000000, 123456789, INT32_MIN, INT32_MAX}) {
    CdfgFunction f = parse_function("func @f() { bb0: %0 = const " +
                                    std::to_string(k) + " ret %0 }");
    ArchConfig arch;
    legalize_immediates(f, arch);
    REQUIRE(verify_ok(f));
    for (const auto& op : f.blocks[0].ops)
      for (const auto& o : op.operands)
        if (o.is_imm()) CHECK(arch.in_imm_range(o.imm));
    auto r = test::run_plain(f, {});
    CHECK(*r.ret == k);
  }
}

TEST_CASE("condbr on a compare becomes setflags plus a predicate branch") {
  std::string text = R"(func @b(%0: i32) {
bb0:
  %1 = ge %0, 5
  condbr %1, bb1(), bb2()
bb1:
  ret 1
bb2:
  ret 0
}
)";
  CdfgFunction f = parse_function(text);
  lower_flags_and_branches(f);
  REQUIRE(verify_ok(f));
  const auto& ops = f.blocks[0].ops;
  REQUIRE(ops.size() == 2);
  CHECK(ops[0].opcode == Opcode::SetFlags);
  CHECK(ops[1].opcode == Opcode::Bge);
  for (Word x : {4, 5, 6}) {
    auto r = test::run_plain(f, {{0, x}});
    CHECK(*r.ret == (x >= 5 ? 1 : 0));
  }
}

TEST_CASE("select on an identity compare constant-folds") {
  std::string text =
      "func @s(%0: i32, %1: i32) { bb0: %2 = eq %0, %0 %3 = select %2, %0, %1 "
      "ret %3 }";
  CdfgFunction f = parse_function(text);
  lower_flags_and_branches(f);
  REQUIRE(verify_ok(f));
  for (const auto& op : f.blocks[0].ops) {
    CHECK(op.opcode != Opcode::Select);
    CHECK(op.opcode != Opcode::Fsel);
    CHECK(op.opcode != Opcode::Fzsel);
  }
  auto r = test::run_plain(f, {{0, 42}, {1, 7}});
  CHECK(*r.ret == 42);
}

TEST_CASE("lowering preserves interpretation on random programs") {
  test::Rng rng(17);
  for (int trial = 0; trial < 60; ++trial) {
    CdfgFunction f = test::random_function(rng);
    CdfgFunction orig = f;
    lower_flags_and_branches(f);
    REQUIRE(verify_ok(f));
    ArchConfig arch;
    legalize_immediates(f, arch);
    REQUIRE(verify_ok(f));
    for (int k = 0; k < 3; ++k) {
      auto args = test::random_args(orig, rng);
      auto r1 = test::run_plain(orig, args);
      auto r2 = test::run_plain(f, args);
      CHECK(r1.ret == r2.ret);
      CHECK(r1.memory == r2.memory);
    }
  }
}

TEST_CASE("full pipeline legalizes the dot kernel and stays equivalent") {
  CdfgFunction f = parse_function(test::conv1d_like_text());
  CdfgFunction orig = f;
  DataLayout layout = dot_layout();
  ArchConfig arch;
  legalize_function(f, layout, arch);
  CHECK(check_legal(f, arch).empty());

  test::Rng rng(9);
  for (int n : {0, 3, 8}) {
    Memory mem = dot_memory(rng, n);
    auto r1 = interpret(orig, mem, bind_args(orig, layout, mem));
    auto r2 = interpret(f, mem, {});
    CHECK(r1.memory == r2.memory);
  }
}

TEST_CASE("check_legal flags a raw select and wide immediates") {
  CdfgFunction f = parse_function(
      "func @s(%0: i32, %1: i32, %2: i32) { bb0: %3 = select %0, %1, %2 ret %3 }");
  ArchConfig arch;
  Diagnostics diags = check_legal(f, arch);
  REQUIRE(diags.size() >= 1);
  CHECK(diags[0].message.find("select") != std::string::npos);

  // Mutating one immediate out of range yields exactly one diagnostic.
  CdfgFunction g = parse_function(test::conv1d_like_text());
  legalize_function(g, dot_layout(), arch);
  REQUIRE(check_legal(g, arch).empty());
  for (auto& b : g.blocks)
    for (auto& op : b.ops)
      for (auto& o : op.operands)
        if (o.is_imm() && op.opcode != Opcode::Const) {
          o.imm = 5000;
          CHECK(check_legal(g, arch).size() == 1);
          o.imm = 0;
          CHECK(check_legal(g, arch).empty());
          goto done;
        }
done:;
}

TEST_CASE("branch arguments are materialized as values") {
  CdfgFunction f = parse_function(test::fig5c_text());
  DataLayout layout;
  layout.bind("arg0", 0, 4);
  ArchConfig arch;
  legalize_function(f, layout, arch);
  for (const auto& b : f.blocks)
    for (const auto& s : b.terminator().successors)
      for (const auto& a : s.args) CHECK(a.is_value());
}

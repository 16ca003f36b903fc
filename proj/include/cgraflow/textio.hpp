#pragma once

#include <stdexcept>
#include <string>

#include "cgraflow/ir.hpp"

namespace cgraflow {

// Thrown for syntax errors, duplicate ids, unknown opcodes, arity mismatches.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, int line, int col)
      : std::runtime_error("line " + std::to_string(line) + ":" +
                           std::to_string(col) + ": " + msg),
        line(line),
        col(col) {}
  int line;
  int col;
};

// Line-oriented textual IR:
//
//   func @name(%0: ptr, %1: i32) {
//   bb0:
//     %2 = const 5
//     %3 = add %2, %1
//     condbr %3, bb1(%3), bb2()
//   bb1(%4: i32):
//     ret %4
//   bb2():
//     ret
//   }
//
// Comments run from ';' to end of line. Operands are %N or decimal
// immediates. The printed form is canonical; parse(print(f)) == f.
CdfgFunction parse_function(const std::string& text);

std::string print_function(const CdfgFunction& f);

}  // namespace cgraflow

#include "cgraflow/textio.hpp"

#include <cctype>
#include <sstream>
#include <unordered_set>

namespace cgraflow {

namespace {

struct Token {
  enum class Kind {
    Ident,    // func, opcode names, labels
    AtName,   // @name
    Value,    // %N
    Int,      // decimal immediate
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Equals,
    End,
  };
  Kind kind;
  std::string text;
  long long num = 0;
  int line = 1;
  int col = 1;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) {}

  Token next() {
    skip_ws_and_comments();
    Token t;
    t.line = line_;
    t.col = col_;
    if (pos_ >= src_.size()) {
      t.kind = Token::Kind::End;
      return t;
    }
    char c = src_[pos_];
    auto single = [&](Token::Kind k) {
      t.kind = k;
      t.text = std::string(1, c);
      advance();
      return t;
    };
    switch (c) {
      case '(': return single(Token::Kind::LParen);
      case ')': return single(Token::Kind::RParen);
      case '{': return single(Token::Kind::LBrace);
      case '}': return single(Token::Kind::RBrace);
      case ',': return single(Token::Kind::Comma);
      case ':': return single(Token::Kind::Colon);
      case '=': return single(Token::Kind::Equals);
      default: break;
    }
    if (c == '@') {
      advance();
      t.kind = Token::Kind::AtName;
      t.text = read_ident();
      if (t.text.empty()) throw ParseError("expected name after '@'", t.line, t.col);
      return t;
    }
    if (c == '%') {
      advance();
      std::string digits = read_digits();
      if (digits.empty())
        throw ParseError("expected numeric value id after '%'", t.line, t.col);
      t.kind = Token::Kind::Value;
      t.num = std::stoll(digits);
      return t;
    }
    if (c == '-' || std::isdigit(static_cast<unsigned char>(c))) {
      bool neg = (c == '-');
      if (neg) advance();
      std::string digits = read_digits();
      if (digits.empty()) throw ParseError("expected digits", t.line, t.col);
      t.kind = Token::Kind::Int;
      t.num = std::stoll(digits) * (neg ? -1 : 1);
      return t;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      t.kind = Token::Kind::Ident;
      t.text = read_ident();
      return t;
    }
    throw ParseError(std::string("unexpected character '") + c + "'", t.line,
                     t.col);
  }

 private:
  void advance() {
    if (pos_ < src_.size()) {
      if (src_[pos_] == '\n') {
        ++line_;
        col_ = 1;
      } else {
        ++col_;
      }
      ++pos_;
    }
  }

  void skip_ws_and_comments() {
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (c == ';') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        advance();
      } else {
        break;
      }
    }
  }

  std::string read_ident() {
    std::string s;
    while (pos_ < src_.size() &&
           (std::isalnum(static_cast<unsigned char>(src_[pos_])) ||
            src_[pos_] == '_')) {
      s += src_[pos_];
      advance();
    }
    return s;
  }

  std::string read_digits() {
    std::string s;
    while (pos_ < src_.size() &&
           std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
      s += src_[pos_];
      advance();
    }
    return s;
  }

  const std::string& src_;
  size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

class Parser {
 public:
  explicit Parser(const std::string& src) : lex_(src) { bump(); }

  CdfgFunction parse() {
    CdfgFunction f;
    expect_ident("func");
    f.name = expect(Token::Kind::AtName).text;
    expect(Token::Kind::LParen);
    if (cur_.kind != Token::Kind::RParen) {
      while (true) {
        FuncArg arg;
        arg.value = value_id(expect(Token::Kind::Value));
        expect(Token::Kind::Colon);
        std::string ty = expect(Token::Kind::Ident).text;
        if (ty == "ptr")
          arg.kind = ArgKind::Pointer;
        else if (ty == "i32")
          arg.kind = ArgKind::Scalar;
        else
          throw ParseError("unknown type '" + ty + "'", cur_.line, cur_.col);
        f.args.push_back(arg);
        if (cur_.kind == Token::Kind::Comma) {
          bump();
          continue;
        }
        break;
      }
    }
    expect(Token::Kind::RParen);
    expect(Token::Kind::LBrace);
    while (cur_.kind != Token::Kind::RBrace) f.blocks.push_back(parse_block());
    expect(Token::Kind::RBrace);
    if (cur_.kind != Token::Kind::End)
      throw ParseError("trailing input after function", cur_.line, cur_.col);
    if (f.blocks.empty())
      throw ParseError("function has no blocks", cur_.line, cur_.col);
    return f;
  }

 private:
  void bump() { cur_ = lex_.next(); }

  Token expect(Token::Kind k) {
    if (cur_.kind != k)
      throw ParseError("unexpected token '" + describe(cur_) + "'", cur_.line,
                       cur_.col);
    Token t = cur_;
    bump();
    return t;
  }

  void expect_ident(const std::string& word) {
    if (cur_.kind != Token::Kind::Ident || cur_.text != word)
      throw ParseError("expected '" + word + "'", cur_.line, cur_.col);
    bump();
  }

  static std::string describe(const Token& t) {
    switch (t.kind) {
      case Token::Kind::Ident: return t.text;
      case Token::Kind::AtName: return "@" + t.text;
      case Token::Kind::Value: return "%" + std::to_string(t.num);
      case Token::Kind::Int: return std::to_string(t.num);
      case Token::Kind::End: return "<eof>";
      default: return t.text;
    }
  }

  ValueId value_id(const Token& t) {
    if (t.num < 0 || t.num >= (long long)kNoValue)
      throw ParseError("value id out of range", t.line, t.col);
    return static_cast<ValueId>(t.num);
  }

  Word immediate(const Token& t) {
    if (t.num < INT32_MIN || t.num > INT32_MAX)
      throw ParseError("immediate out of 32-bit range", t.line, t.col);
    return static_cast<Word>(t.num);
  }

  BasicBlock parse_block() {
    BasicBlock b;
    Token name = expect(Token::Kind::Ident);
    b.label = name.text;
    if (cur_.kind == Token::Kind::LParen) {
      bump();
      if (cur_.kind != Token::Kind::RParen) {
        while (true) {
          BlockParam p;
          p.value = value_id(expect(Token::Kind::Value));
          expect(Token::Kind::Colon);
          expect_ident("i32");
          b.params.push_back(p);
          if (cur_.kind == Token::Kind::Comma) {
            bump();
            continue;
          }
          break;
        }
      }
      expect(Token::Kind::RParen);
    }
    expect(Token::Kind::Colon);
    while (true) {
      if (cur_.kind == Token::Kind::RBrace)
        throw ParseError("block '" + b.label + "' has no terminator", cur_.line,
                         cur_.col);
      Operation op = parse_op(b.label);
      bool term = is_terminator(op.opcode);
      b.ops.push_back(std::move(op));
      if (term) break;
    }
    return b;
  }

  Operation parse_op(const std::string& block) {
    Operation op;
    if (cur_.kind == Token::Kind::Value) {
      Token res = cur_;
      bump();
      expect(Token::Kind::Equals);
      op.result = value_id(res);
    }
    Token name = expect(Token::Kind::Ident);
    auto opc = opcode_from_name(name.text);
    if (!opc)
      throw ParseError("unknown opcode '" + name.text + "'", name.line,
                       name.col);
    op.opcode = *opc;

    switch (op.opcode) {
      case Opcode::Br:
      case Opcode::Jump:
        op.successors.push_back(parse_successor());
        break;
      case Opcode::CondBr:
      case Opcode::Bge:
      case Opcode::Blt:
      case Opcode::Beq:
      case Opcode::Bne:
        op.operands.push_back(parse_operand());
        expect(Token::Kind::Comma);
        op.successors.push_back(parse_successor());
        expect(Token::Kind::Comma);
        op.successors.push_back(parse_successor());
        break;
      case Opcode::Ret:
        if (cur_.kind == Token::Kind::Value || cur_.kind == Token::Kind::Int)
          op.operands.push_back(parse_operand());
        break;
      default: {
        if (cur_.kind == Token::Kind::Value || cur_.kind == Token::Kind::Int) {
          op.operands.push_back(parse_operand());
          while (cur_.kind == Token::Kind::Comma) {
            bump();
            op.operands.push_back(parse_operand());
          }
        }
        break;
      }
    }
    (void)block;
    return op;
  }

  Operand parse_operand() {
    if (cur_.kind == Token::Kind::Value) {
      Token t = cur_;
      bump();
      return Operand::val(value_id(t));
    }
    if (cur_.kind == Token::Kind::Int) {
      Token t = cur_;
      bump();
      return Operand::immediate(immediate(t));
    }
    throw ParseError("expected operand", cur_.line, cur_.col);
  }

  SuccessorRef parse_successor() {
    SuccessorRef s;
    s.label = expect(Token::Kind::Ident).text;
    if (cur_.kind == Token::Kind::LParen) {
      bump();
      if (cur_.kind != Token::Kind::RParen) {
        while (true) {
          s.args.push_back(parse_operand());
          if (cur_.kind == Token::Kind::Comma) {
            bump();
            continue;
          }
          break;
        }
      }
      expect(Token::Kind::RParen);
    }
    return s;
  }

  Lexer lex_;
  Token cur_;
};

void print_operand(std::ostream& os, const Operand& o) {
  if (o.is_value())
    os << "%" << o.value;
  else
    os << o.imm;
}

void print_successor(std::ostream& os, const SuccessorRef& s) {
  os << s.label << "(";
  for (size_t i = 0; i < s.args.size(); ++i) {
    if (i) os << ", ";
    print_operand(os, s.args[i]);
  }
  os << ")";
}

}  // namespace

CdfgFunction parse_function(const std::string& text) {
  Parser p(text);
  CdfgFunction f = p.parse();
  // The parser enforces the grammar; structural rules (single def, dominance,
  // arity vs. params) are the verifier's job, reported with block context.
  Diagnostics diags = verify(f);
  if (!diags.empty())
    throw ParseError("invalid function:\n" + diagnostics_to_string(diags), 0, 0);
  return f;
}

std::string print_function(const CdfgFunction& f) {
  std::ostringstream os;
  os << "func @" << f.name << "(";
  for (size_t i = 0; i < f.args.size(); ++i) {
    if (i) os << ", ";
    os << "%" << f.args[i].value << ": "
       << (f.args[i].kind == ArgKind::Pointer ? "ptr" : "i32");
  }
  os << ") {\n";
  for (const auto& b : f.blocks) {
    os << b.label;
    if (!b.params.empty()) {
      os << "(";
      for (size_t i = 0; i < b.params.size(); ++i) {
        if (i) os << ", ";
        os << "%" << b.params[i].value << ": i32";
      }
      os << ")";
    }
    os << ":\n";
    for (const auto& op : b.ops) {
      os << "  ";
      if (op.result) os << "%" << *op.result << " = ";
      os << opcode_name(op.opcode);
      bool first = true;
      for (const auto& o : op.operands) {
        os << (first ? " " : ", ");
        print_operand(os, o);
        first = false;
      }
      for (const auto& s : op.successors) {
        os << (first ? " " : ", ");
        print_successor(os, s);
        first = false;
      }
      os << "\n";
    }
  }
  os << "}\n";
  return os.str();
}

}  // namespace cgraflow

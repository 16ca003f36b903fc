#include "cgraflow/ir.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace cgraflow {

const char* opcode_name(Opcode op) {
  switch (op) {
    case Opcode::Const: return "const";
    case Opcode::Add: return "add";
    case Opcode::Sub: return "sub";
    case Opcode::Mul: return "mul";
    case Opcode::Lt: return "lt";
    case Opcode::Ge: return "ge";
    case Opcode::Eq: return "eq";
    case Opcode::Ne: return "ne";
    case Opcode::Select: return "select";
    case Opcode::Load: return "load";
    case Opcode::Store: return "store";
    case Opcode::Br: return "br";
    case Opcode::CondBr: return "condbr";
    case Opcode::Ret: return "ret";
    case Opcode::Jump: return "jump";
    case Opcode::SetFlags: return "setflags";
    case Opcode::Fsel: return "fsel";
    case Opcode::Fzsel: return "fzsel";
    case Opcode::Bge: return "bge";
    case Opcode::Blt: return "blt";
    case Opcode::Beq: return "beq";
    case Opcode::Bne: return "bne";
  }
  return "?";
}

std::optional<Opcode> opcode_from_name(const std::string& name) {
  static const std::unordered_map<std::string, Opcode> table = {
      {"const", Opcode::Const},   {"add", Opcode::Add},
      {"sub", Opcode::Sub},       {"mul", Opcode::Mul},
      {"lt", Opcode::Lt},         {"ge", Opcode::Ge},
      {"eq", Opcode::Eq},         {"ne", Opcode::Ne},
      {"select", Opcode::Select}, {"load", Opcode::Load},
      {"store", Opcode::Store},   {"br", Opcode::Br},
      {"condbr", Opcode::CondBr}, {"ret", Opcode::Ret},
      {"jump", Opcode::Jump},     {"setflags", Opcode::SetFlags},
      {"fsel", Opcode::Fsel},     {"fzsel", Opcode::Fzsel},
      {"bge", Opcode::Bge},       {"blt", Opcode::Blt},
      {"beq", Opcode::Beq},       {"bne", Opcode::Bne},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

bool is_terminator(Opcode op) {
  switch (op) {
    case Opcode::Br:
    case Opcode::CondBr:
    case Opcode::Ret:
    case Opcode::Jump:
    case Opcode::Bge:
    case Opcode::Blt:
    case Opcode::Beq:
    case Opcode::Bne:
      return true;
    default:
      return false;
  }
}

bool is_compare(Opcode op) {
  return op == Opcode::Lt || op == Opcode::Ge || op == Opcode::Eq ||
         op == Opcode::Ne;
}

bool is_flag_branch(Opcode op) {
  return op == Opcode::Bge || op == Opcode::Blt || op == Opcode::Beq ||
         op == Opcode::Bne;
}

bool writes_rout(Opcode op) {
  switch (op) {
    case Opcode::Const:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Mul:
    case Opcode::Lt:
    case Opcode::Ge:
    case Opcode::Eq:
    case Opcode::Ne:
    case Opcode::Select:
    case Opcode::Load:
    case Opcode::SetFlags:
    case Opcode::Fsel:
    case Opcode::Fzsel:
      return true;
    default:
      return false;
  }
}

bool writes_flags(Opcode op) {
  switch (op) {
    case Opcode::Const:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Mul:
    case Opcode::SetFlags:
    case Opcode::Fsel:
    case Opcode::Fzsel:
      return true;
    default:
      return false;
  }
}

const BasicBlock* CdfgFunction::find_block(const std::string& label) const {
  for (const auto& b : blocks)
    if (b.label == label) return &b;
  return nullptr;
}

BasicBlock* CdfgFunction::find_block(const std::string& label) {
  for (auto& b : blocks)
    if (b.label == label) return &b;
  return nullptr;
}

int CdfgFunction::block_index(const std::string& label) const {
  for (size_t i = 0; i < blocks.size(); ++i)
    if (blocks[i].label == label) return static_cast<int>(i);
  return -1;
}

ValueId CdfgFunction::next_value_id() const {
  ValueId next = 0;
  auto bump = [&next](ValueId v) {
    if (v != kNoValue && v + 1 > next) next = v + 1;
  };
  for (const auto& a : args) bump(a.value);
  for (const auto& b : blocks) {
    for (const auto& p : b.params) bump(p.value);
    for (const auto& op : b.ops) {
      if (op.result) bump(*op.result);
      for (const auto& o : op.operands)
        if (o.is_value()) bump(o.value);
      for (const auto& s : op.successors)
        for (const auto& a : s.args)
          if (a.is_value()) bump(a.value);
    }
  }
  return next;
}

int ArchConfig::diameter() const {
  // BFS from every PE; meshes here are tiny.
  int n = num_pes();
  int best = 0;
  for (int s = 0; s < n; ++s) {
    std::vector<int> dist(n, -1);
    std::deque<int> q{s};
    dist[s] = 0;
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (int v : neighbors(u)) {
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
      }
    }
    for (int d : dist) best = std::max(best, d);
  }
  return best;
}

int ArchConfig::move_budget() const {
  int cap = std::max(0, diameter() - 1);
  if (max_moves < 0) return cap;
  return std::min(max_moves, cap);
}

bool ArchConfig::in_imm_range(Word w) const {
  return w >= imm_min() && w <= imm_max();
}

std::vector<int> ArchConfig::neighbors(int p) const {
  std::vector<int> out;
  int r = p / cols, c = p % cols;
  auto push = [&](int rr, int cc) {
    if (torus) {
      rr = (rr + rows) % rows;
      cc = (cc + cols) % cols;
    } else if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) {
      return;
    }
    int q = rr * cols + cc;
    if (q != p && std::find(out.begin(), out.end(), q) == out.end())
      out.push_back(q);
  };
  push(r - 1, c);
  push(r + 1, c);
  push(r, c - 1);
  push(r, c + 1);
  std::sort(out.begin(), out.end());
  return out;
}

bool ArchConfig::adjacent_or_same(int consumer, int producer) const {
  if (consumer == producer) return true;
  auto ns = neighbors(producer);
  return std::find(ns.begin(), ns.end(), consumer) != ns.end();
}

std::string ArchConfig::validate() const {
  if (rows < 1 || cols < 1) return "mesh must have at least one PE";
  if (regs < 1) return "at least one internal register per PE required";
  if (imm_width < 4 || imm_width > 31) return "imm_width out of range [4,31]";
  if (theta < 0) return "theta must be non-negative";
  return "";
}

ArchConfig ArchConfig::from_spec(const std::string& spec) {
  ArchConfig a;
  auto x = spec.find('x');
  if (x == std::string::npos) throw std::runtime_error("arch spec must be RxC");
  a.rows = std::stoi(spec.substr(0, x));
  a.cols = std::stoi(spec.substr(x + 1));
  std::string err = a.validate();
  if (!err.empty()) throw std::runtime_error("bad arch spec: " + err);
  return a;
}

namespace {

struct DefSite {
  // kind: 0 = function arg, 1 = block param, 2 = op result
  int kind = 0;
  int block = -1;
  int op_index = -1;
};

int expected_operand_count(Opcode op) {
  switch (op) {
    case Opcode::Const: return 1;
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Mul:
    case Opcode::Lt:
    case Opcode::Ge:
    case Opcode::Eq:
    case Opcode::Ne:
    case Opcode::SetFlags:
      return 2;
    case Opcode::Select:
    case Opcode::Fsel:
    case Opcode::Fzsel:
      return 3;
    case Opcode::Load: return 1;
    case Opcode::Store: return 2;
    case Opcode::CondBr: return 1;
    case Opcode::Bge:
    case Opcode::Blt:
    case Opcode::Beq:
    case Opcode::Bne:
      return 1;
    case Opcode::Br:
    case Opcode::Jump:
      return 0;
    case Opcode::Ret: return -1;  // 0 or 1
  }
  return -1;
}

int expected_successor_count(Opcode op) {
  switch (op) {
    case Opcode::Br:
    case Opcode::Jump:
      return 1;
    case Opcode::CondBr:
    case Opcode::Bge:
    case Opcode::Blt:
    case Opcode::Beq:
    case Opcode::Bne:
      return 2;
    case Opcode::Ret: return 0;
    default: return 0;
  }
}

bool opcode_has_result(Opcode op) {
  switch (op) {
    case Opcode::Store:
    case Opcode::Br:
    case Opcode::CondBr:
    case Opcode::Ret:
    case Opcode::Jump:
    case Opcode::Bge:
    case Opcode::Blt:
    case Opcode::Beq:
    case Opcode::Bne:
      return false;
    default:
      return true;
  }
}

}  // namespace

Diagnostics verify(const CdfgFunction& f) {
  Diagnostics diags;
  auto err = [&diags](const std::string& msg, const std::string& block = "") {
    diags.push_back(Diagnostic{msg, block, 0, 0});
  };

  if (f.blocks.empty()) {
    err("function has no blocks");
    return diags;
  }

  // Unique labels.
  std::unordered_map<std::string, int> label_index;
  for (size_t i = 0; i < f.blocks.size(); ++i) {
    if (!label_index.emplace(f.blocks[i].label, int(i)).second)
      err("duplicate block label", f.blocks[i].label);
  }

  // Single definition per value.
  std::unordered_map<ValueId, DefSite> defs;
  auto define = [&](ValueId v, DefSite site, const std::string& where) {
    if (v == kNoValue) {
      err("invalid value id", where);
      return;
    }
    if (!defs.emplace(v, site).second) err("multiple definitions of value", where);
  };
  for (const auto& a : f.args) define(a.value, DefSite{0, -1, -1}, "@args");
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const auto& b = f.blocks[bi];
    for (const auto& p : b.params)
      define(p.value, DefSite{1, int(bi), -1}, b.label);
    for (size_t oi = 0; oi < b.ops.size(); ++oi) {
      const auto& op = b.ops[oi];
      if (op.result) {
        if (!opcode_has_result(op.opcode))
          err(std::string(opcode_name(op.opcode)) + " cannot produce a result",
              b.label);
        define(*op.result, DefSite{2, int(bi), int(oi)}, b.label);
      } else if (opcode_has_result(op.opcode)) {
        err(std::string(opcode_name(op.opcode)) + " must produce a result",
            b.label);
      }
    }
  }

  if (!f.blocks.front().params.empty())
    err("entry block must not declare params", f.blocks.front().label);

  // Terminator placement and shape, operand arity.
  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const auto& b = f.blocks[bi];
    if (b.ops.empty()) {
      err("block has no operations", b.label);
      continue;
    }
    for (size_t oi = 0; oi < b.ops.size(); ++oi) {
      const auto& op = b.ops[oi];
      bool last = (oi + 1 == b.ops.size());
      if (is_terminator(op.opcode) != last)
        err(last ? "block does not end with a terminator"
                 : "terminator in the middle of a block",
            b.label);
      int want = expected_operand_count(op.opcode);
      if (op.opcode == Opcode::Ret) {
        if (op.operands.size() > 1) err("ret takes at most one operand", b.label);
      } else if (want >= 0 && int(op.operands.size()) != want) {
        err(std::string("operand count mismatch for ") + opcode_name(op.opcode),
            b.label);
      }
      if (int(op.successors.size()) != expected_successor_count(op.opcode))
        err(std::string("successor count mismatch for ") +
                opcode_name(op.opcode),
            b.label);
      if (op.opcode == Opcode::Const && !op.operands.empty() &&
          op.operands[0].is_value())
        err("const takes an immediate operand", b.label);
      for (const auto& s : op.successors) {
        auto it = label_index.find(s.label);
        if (it == label_index.end()) {
          err("branch to unknown block " + s.label, b.label);
          continue;
        }
        const auto& target = f.blocks[it->second];
        if (s.args.size() != target.params.size())
          err("argument count does not match params of " + s.label, b.label);
      }
    }
  }

  if (!diags.empty()) return diags;  // shape errors make dominance noisy

  // Reachability from entry.
  std::vector<bool> reachable(f.blocks.size(), false);
  {
    std::deque<int> q{0};
    reachable[0] = true;
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (const auto& s : f.blocks[u].terminator().successors) {
        int v = label_index.at(s.label);
        if (!reachable[v]) {
          reachable[v] = true;
          q.push_back(v);
        }
      }
    }
    for (size_t i = 0; i < f.blocks.size(); ++i)
      if (!reachable[i]) err("block unreachable from entry", f.blocks[i].label);
  }

  // Dominator sets (iterative, fine at this scale).
  size_t n = f.blocks.size();
  std::vector<std::set<int>> dom(n);
  std::set<int> all;
  for (size_t i = 0; i < n; ++i) all.insert(int(i));
  for (size_t i = 0; i < n; ++i) dom[i] = (i == 0) ? std::set<int>{0} : all;
  std::vector<std::vector<int>> preds(n);
  for (size_t bi = 0; bi < n; ++bi)
    for (const auto& s : f.blocks[bi].terminator().successors)
      preds[label_index.at(s.label)].push_back(int(bi));
  bool changed = true;
  while (changed) {
    changed = false;
    for (size_t i = 1; i < n; ++i) {
      if (!reachable[i]) continue;
      std::set<int> nd = all;
      bool any = false;
      for (int p : preds[i]) {
        if (!reachable[p]) continue;
        any = true;
        std::set<int> tmp;
        std::set_intersection(nd.begin(), nd.end(), dom[p].begin(),
                              dom[p].end(), std::inserter(tmp, tmp.begin()));
        nd = std::move(tmp);
      }
      if (!any) nd.clear();
      nd.insert(int(i));
      if (nd != dom[i]) {
        dom[i] = std::move(nd);
        changed = true;
      }
    }
  }

  // Dominance of uses.
  auto check_use = [&](ValueId v, int use_block, int use_op,
                       const std::string& where) {
    auto it = defs.find(v);
    if (it == defs.end()) {
      err("use of undefined value", where);
      return;
    }
    const DefSite& d = it->second;
    if (d.kind == 0) return;  // function args dominate everything
    if (d.block == use_block) {
      if (d.kind == 1) return;  // params defined at block start
      if (d.op_index >= use_op)
        err("use before definition in block", where);
      return;
    }
    if (!dom[use_block].count(d.block))
      err("use not dominated by definition", where);
  };
  for (size_t bi = 0; bi < n; ++bi) {
    if (!reachable[bi]) continue;
    const auto& b = f.blocks[bi];
    for (size_t oi = 0; oi < b.ops.size(); ++oi) {
      const auto& op = b.ops[oi];
      for (const auto& o : op.operands)
        if (o.is_value()) check_use(o.value, int(bi), int(oi), b.label);
      for (const auto& s : op.successors)
        for (const auto& a : s.args)
          if (a.is_value()) check_use(a.value, int(bi), int(oi), b.label);
    }
  }

  return diags;
}

bool verify_ok(const CdfgFunction& f) { return verify(f).empty(); }

std::string diagnostics_to_string(const Diagnostics& diags) {
  std::ostringstream os;
  for (const auto& d : diags) {
    if (d.line > 0) os << "line " << d.line << ":" << d.col << ": ";
    if (!d.block.empty()) os << "[" << d.block << "] ";
    os << d.message << "\n";
  }
  return os.str();
}

int remove_unreachable_blocks(CdfgFunction& f) {
  if (f.blocks.empty()) return 0;
  std::unordered_set<std::string> reachable;
  std::deque<std::string> q{f.blocks.front().label};
  reachable.insert(f.blocks.front().label);
  while (!q.empty()) {
    const BasicBlock* b = f.find_block(q.front());
    q.pop_front();
    for (const auto& s : b->terminator().successors)
      if (reachable.insert(s.label).second) q.push_back(s.label);
  }
  size_t before = f.blocks.size();
  f.blocks.erase(std::remove_if(f.blocks.begin(), f.blocks.end(),
                                [&](const BasicBlock& b) {
                                  return !reachable.count(b.label);
                                }),
                 f.blocks.end());
  return static_cast<int>(before - f.blocks.size());
}

int remove_dead_pure_ops(CdfgFunction& f) {
  int removed = 0;
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_set<ValueId> used;
    for (const auto& b : f.blocks)
      for (const auto& op : b.ops) {
        for (const auto& o : op.operands)
          if (o.is_value()) used.insert(o.value);
        for (const auto& s : op.successors)
          for (const auto& a : s.args)
            if (a.is_value()) used.insert(a.value);
      }
    for (auto& b : f.blocks) {
      auto dead = [&](const Operation& op) {
        if (is_terminator(op.opcode) || op.opcode == Opcode::Store ||
            op.opcode == Opcode::Load)
          return false;
        return op.result && !used.count(*op.result);
      };
      size_t before = b.ops.size();
      b.ops.erase(std::remove_if(b.ops.begin(), b.ops.end(), dead), b.ops.end());
      if (b.ops.size() != before) {
        removed += static_cast<int>(before - b.ops.size());
        changed = true;
      }
    }
  }
  return removed;
}

}  // namespace cgraflow

#include "cgraflow/memory.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace cgraflow {

Word Memory::load(uint32_t addr) const {
  if (!valid(addr))
    throw std::runtime_error("memory fault: load at " + std::to_string(addr));
  return words_[addr / 4];
}

void Memory::store(uint32_t addr, Word w) {
  if (!valid(addr))
    throw std::runtime_error("memory fault: store at " + std::to_string(addr));
  words_[addr / 4] = w;
}

void Memory::ensure(uint32_t addr_end) {
  uint32_t need = (addr_end + 3) / 4;
  if (need > words_.size()) words_.resize(need, 0);
}

void DataLayout::bind(const std::string& name, uint32_t base, uint32_t extent) {
  bindings_.push_back(Binding{name, base, extent});
}

const Binding* DataLayout::find(const std::string& name) const {
  for (const auto& b : bindings_)
    if (b.name == name) return &b;
  return nullptr;
}

uint32_t DataLayout::eviction_base() const {
  uint32_t end = 0;
  for (const auto& b : bindings_) end = std::max(end, b.base + b.extent);
  return (end + 63) / 64 * 64;  // padded, word aligned
}

uint32_t DataLayout::alloc_eviction_slot() {
  uint32_t slot = eviction_base() + 4 * evict_used_;
  ++evict_used_;
  return slot;
}

uint32_t DataLayout::address_space_bytes() const {
  // Leave headroom in the pool so compilation never outgrows the store.
  return eviction_base() + 4 * std::max<uint32_t>(evict_used_ + 16, 64);
}

std::string DataLayout::validate() const {
  for (const auto& b : bindings_) {
    if (b.base % 4 != 0 || b.extent % 4 != 0)
      return "binding '" + b.name + "' is not word aligned";
    if (b.extent == 0) return "binding '" + b.name + "' has zero extent";
  }
  for (size_t i = 0; i < bindings_.size(); ++i)
    for (size_t j = i + 1; j < bindings_.size(); ++j) {
      const auto& a = bindings_[i];
      const auto& b = bindings_[j];
      if (a.base < b.base + b.extent && b.base < a.base + a.extent)
        return "bindings '" + a.name + "' and '" + b.name + "' overlap";
    }
  return "";
}

DataLayout DataLayout::parse(const std::string& text) {
  DataLayout layout;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto cut = line.find(';');
    if (cut != std::string::npos) line = line.substr(0, cut);
    std::istringstream ls(line);
    std::string name, eq;
    if (!(ls >> name)) continue;  // blank
    long long base = 0, extent = 0;
    char comma = 0;
    if (!(ls >> eq) || eq != "=" || !(ls >> base >> comma >> extent) ||
        comma != ',')
      throw std::runtime_error("layout line " + std::to_string(lineno) +
                               ": expected 'name = base, extent'");
    layout.bind(name, static_cast<uint32_t>(base),
                static_cast<uint32_t>(extent));
  }
  std::string err = layout.validate();
  if (!err.empty()) throw std::runtime_error("bad layout: " + err);
  return layout;
}

std::string DataLayout::print() const {
  std::ostringstream os;
  for (const auto& b : bindings_)
    os << b.name << " = " << b.base << ", " << b.extent << "\n";
  return os.str();
}

}  // namespace cgraflow

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"

namespace cgraflow {

// Byte-addressed word store; all accesses are 4-byte aligned words.
class Memory {
 public:
  Memory() = default;
  explicit Memory(uint32_t size_bytes) : words_((size_bytes + 3) / 4, 0) {}

  uint32_t size_bytes() const { return static_cast<uint32_t>(words_.size()) * 4; }

  bool valid(uint32_t addr) const {
    return addr % 4 == 0 && addr / 4 < words_.size();
  }
  Word load(uint32_t addr) const;
  void store(uint32_t addr, Word w);
  void ensure(uint32_t addr_end);  // grow to cover [0, addr_end)

  bool operator==(const Memory& o) const { return words_ == o.words_; }
  const std::vector<Word>& words() const { return words_; }
  std::vector<Word>& words() { return words_; }

 private:
  std::vector<Word> words_;
};

// One bound memory region per pointer or scalar function argument. Scalar
// arguments occupy a single word; the value lives in memory and is loaded
// from its base address ("only the base address is needed").
struct Binding {
  std::string name;   // argK, by position
  uint32_t base = 0;  // word-aligned byte address
  uint32_t extent = 0;  // bytes
};

class DataLayout {
 public:
  void bind(const std::string& name, uint32_t base, uint32_t extent);
  const Binding* find(const std::string& name) const;
  const std::vector<Binding>& bindings() const { return bindings_; }

  // Reserved pool for values evicted to memory; disjoint from all bindings.
  // Slots are handed out a word at a time.
  uint32_t eviction_base() const;
  uint32_t alloc_eviction_slot();
  uint32_t eviction_slots_used() const { return evict_used_; }

  // Total bytes the program may touch (bindings plus the eviction pool).
  uint32_t address_space_bytes() const;

  std::string validate() const;  // empty if regions are aligned and disjoint

  // File format: one "name = base, extent" line per binding, decimal,
  // ';' comments.
  static DataLayout parse(const std::string& text);
  std::string print() const;

 private:
  std::vector<Binding> bindings_;
  uint32_t evict_used_ = 0;
};

}  // namespace cgraflow

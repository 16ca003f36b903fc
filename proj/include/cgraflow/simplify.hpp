#pragma once

#include <set>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"

namespace cgraflow {

enum class TransformKind { HorizontalMerge, VerticalMerge, FuseHeadBody };

const char* transform_name(TransformKind k);

struct MergeReport {
  struct Entry {
    TransformKind kind;
    std::vector<std::string> blocks;  // labels involved, at application time
  };
  std::vector<Entry> applied;
  int blocks_before = 0;
  int blocks_after = 0;

  void merge_from(const MergeReport& other);
};

// Full prediction for a write-free diamond rooted at `pred`: both arm bodies
// are inlined and a select keyed on the original condition picks each merged
// value. Returns false (function untouched) when the pattern does not match.
bool horizontal_merge(CdfgFunction& f, const std::string& pred,
                      MergeReport& report);

// Merges a block into its unique unconditional predecessor.
bool vertical_merge(CdfgFunction& f, const std::string& pred,
                    MergeReport& report);

// Rewrites a frontend-style loop (head checks the exit condition, body
// branches back to head) so the body carries its own exit check and loops on
// itself. When the entry check is decidable at compile time the head's
// condbr collapses to an unconditional branch.
bool fuse_head_body(CdfgFunction& f, const std::string& head,
                    MergeReport& report);

// Applies the enabled transforms to a fixed point, lowest block index first.
MergeReport run_simplify(CdfgFunction& f, const std::set<TransformKind>& enabled);

inline std::set<TransformKind> all_transforms() {
  return {TransformKind::HorizontalMerge, TransformKind::VerticalMerge,
          TransformKind::FuseHeadBody};
}

}  // namespace cgraflow

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cgraflow/ir.hpp"
#include "cgraflow/liveness.hpp"

namespace cgraflow {

struct OpPlacement {
  int t = -1;   // absolute cycle in [0, L)
  int pe = -1;  // row-major PE index
};

// A modulo schedule for one self-looping block. Invariants (enforced by
// check_schedule, on every schedule from any source):
//  - II <= L, no two ops share (t mod II, pe);
//  - every dependence with iteration distance d satisfies
//    1 <= t_use + d*II - t_def <= II, so at most one instance of a value is
//    alive and every consumer can reach it through Rout or a local slot;
//  - the loop branch sits at cycle II-1 with its setflags at II-2 on the
//    same PE;
//  - stores occupy pairwise distinct rows mod II.
struct ModuloSchedule {
  std::string block;
  int ii = 0;
  int length = 0;  // L = max t + 1
  std::vector<OpPlacement> placements;  // indexed like the block's ops
};

// Derived storage decisions: how each cross-iteration value and each
// loop-invariant live-in is homed. Filled in by check_schedule.
struct ScheduleService {
  std::map<ValueId, RegClass> carried;   // values consumed in a later beat
  std::map<ValueId, int> live_in_home;   // PE holding each live-in, slot class
};

Diagnostics check_schedule(const CdfgFunction& f, const ModuloSchedule& ms,
                           const ArchConfig& arch,
                           ScheduleService* service = nullptr);

// Lower bounds exposed for tests and reporting.
int res_mii(const CdfgFunction& f, const std::string& block,
            const ArchConfig& arch);
int rec_mii(const CdfgFunction& f, const std::string& block);

struct ScheduleAttempt {
  std::optional<ModuloSchedule> schedule;
  int res_mii = 0;
  int rec_mii = 0;
  std::string reason;  // set when no schedule was found
};

// Iterative deepening from max(ResMII, RecMII, 2) up to ii_max with a
// deterministic backtracking placer.
ScheduleAttempt schedule_loop(const CdfgFunction& f, const std::string& block,
                              const ArchConfig& arch, int ii_max);

// Text format: "II=<n> L=<n> block=<label>" then one "<opid> t=<c> pe=<i>"
// line per op, opids following the printed IR's in-block order. The parsed
// schedule must pass check_schedule before it is accepted.
ModuloSchedule import_schedule(const std::string& text, const CdfgFunction& f,
                               const ArchConfig& arch);
std::string print_schedule(const ModuloSchedule& ms);

// Mapping seed for one rebuilt block: per-op (cycle, PE) rows.
struct BlockSeed {
  std::string label;
  std::vector<OpPlacement> placement;
};

struct ValuePin {
  ValueId value = kNoValue;
  int pe = -1;
  RegClass reg_class = RegClass::Internal;
};

struct AdaptResult {
  int stages = 1;                 // ceil(L / II)
  std::vector<std::string> stage_blocks;  // fill blocks then the kernel
  std::vector<std::string> exit_blocks;
  std::vector<BlockSeed> seeds;
  std::vector<ValuePin> pins;     // schedule-dictated homes for the table
};

// Algorithm-1-style reshaping: the loop block becomes ceil(L/II) stage
// blocks (the last one self-iterating with length II) plus epilogue blocks
// that drain in-flight iterations and jump to the loop's original successor.
// Stage l holds, per in-flight iteration, the ops of its current II-window;
// values that cross a stage boundary thread through block arguments.
// Placements are carried over verbatim as mapping seeds.
AdaptResult adapt_cfg(CdfgFunction& f, const ModuloSchedule& ms,
                      const ArchConfig& arch);

// Self-looping legalized blocks whose only control op is the terminator.
std::vector<std::string> find_pipelinable_loops(const CdfgFunction& f);

}  // namespace cgraflow

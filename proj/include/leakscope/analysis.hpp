#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "leakscope/trace_format.hpp"

namespace leakscope {

struct AnalysisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Leakage granularity g = 2^b bytes: analyses discard the b low bits of every
// data address. 64 models a cache-line observer, 4 a 4-byte observer, 1 keeps
// full byte resolution.
struct GranularityConfig {
    uint64_t g = 1;
    unsigned shift = 0;

    static GranularityConfig bytes(uint64_t g) { return {g, granularity_shift(g)}; }
};

// Analysis-time transform: data-address offsets right-shifted by the
// granularity, code offsets untouched. The input trace is not modified.
std::vector<PreprocessedEntry> apply_granularity(std::span<const PreprocessedEntry> trace,
                                                 GranularityConfig cfg);

// ---------------------------------------------------------------------------
// Mutual information over observed-state classes

// Leakage score for one target (whole trace or single instruction), together
// with its theoretical maximum log2 |X|.
struct MIResult {
    double mi_bits = 0.0;
    double max_bits = 0.0;
    double min_entropy_bits = 0.0;  // log2(class_count): worst-case single-guess leakage
    size_t class_count = 0;
    std::vector<size_t> class_sizes;  // descending

    friend bool operator==(const MIResult&, const MIResult&) = default;
};

// Computes the MI score from the partition of |X| test cases into
// equal-observation classes:  sum over classes of (c/|X|) * log2(|X|/c).
// Throws AnalysisError on an empty partition or non-positive sizes.
MIResult mi_from_counts(std::span<const size_t> class_sizes);

// ---------------------------------------------------------------------------
// Analysis 1: entry-wise trace comparison

struct DiffHunk {
    size_t a_begin = 0, a_end = 0;  // entry index ranges, end exclusive
    size_t b_begin = 0, b_end = 0;
    std::vector<PreprocessedEntry> a_excerpt;  // capped at a few entries
    std::vector<PreprocessedEntry> b_excerpt;
};

struct Divergence {
    std::optional<size_t> first_diff_index;
    std::vector<DiffHunk> hunks;

    bool identical() const { return !first_diff_index.has_value(); }
};

// Positional comparison; hunks resynchronize within a sliding window of 64
// entries (longest-common-run heuristic). Past a failed resync the remainder
// is one hunk.
inline constexpr size_t kResyncWindow = 64;
Divergence compare_traces(std::span<const PreprocessedEntry> a,
                          std::span<const PreprocessedEntry> b);

// ---------------------------------------------------------------------------
// Analysis 2: whole-trace MI

using TraceView = std::span<const PreprocessedEntry>;

struct MICurvePoint {
    size_t prefix_entries = 0;
    MIResult result;
};

struct WholeTraceMI {
    std::vector<MICurvePoint> curve;  // at each checkpoint
    MIResult final_result;            // over full traces
    size_t checkpoint_interval = 1;
};

// Checkpoint interval heuristic: every entry up to 10^5 entries, then scaled
// so at most 10^5 checkpoints are kept.
size_t default_checkpoint_interval(size_t max_trace_entries);

// Rolling-hash MI over trace prefixes. Traces are expected already
// granularity-reduced. At checkpoint i every trace contributes the hash of
// its first min(i, length) entries; traces shorter than i contribute their
// final hash, so every checkpoint still sees |X| observations. Requires at
// least two traces and interval >= 1 (0 selects the default interval).
WholeTraceMI whole_trace_mi(const std::vector<TraceView>& traces, size_t checkpoint_interval);

// Single-threaded reference implementation with identical results.
WholeTraceMI whole_trace_mi_serial(const std::vector<TraceView>& traces,
                                   size_t checkpoint_interval);

// ---------------------------------------------------------------------------
// Analysis 3: single-instruction MI

enum class LeakClass : uint8_t {
    ControlFlow = 0,
    Memory = 1,
};

const char* to_string(LeakClass leak_class);

struct InstructionKey {
    AbsCodeRef ref;
    LeakClass leak_class = LeakClass::ControlFlow;

    friend bool operator==(const InstructionKey&, const InstructionKey&) = default;
    friend auto operator<=>(const InstructionKey&, const InstructionKey&) = default;
};

struct InstructionMI {
    InstructionKey key;
    MIResult result;
};

// Per-instruction MI, sorted by instruction. For every memory-accessing
// instruction the per-case observation is the hash chain over its
// granularity-reduced target addresses in execution order; for every branch
// instruction it is the chain over (branch kind, destination) pairs. Cases
// that never execute an instruction contribute the empty-sequence hash.
// Requires at least two traces.
std::vector<InstructionMI> instruction_mi(const std::vector<TraceView>& traces,
                                          GranularityConfig cfg);

// Single-threaded reference implementation with identical results.
std::vector<InstructionMI> instruction_mi_serial(const std::vector<TraceView>& traces,
                                                 GranularityConfig cfg);

// Convenience for tests and tools.
std::vector<TraceView> trace_views(const std::vector<PreprocessedTrace>& traces);

}  // namespace leakscope

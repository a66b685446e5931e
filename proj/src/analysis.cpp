#include "leakscope/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

namespace leakscope {

const char* to_string(LeakClass leak_class) {
    switch (leak_class) {
        case LeakClass::ControlFlow: return "control_flow";
        case LeakClass::Memory: return "memory";
    }
    return "?";
}

std::vector<PreprocessedEntry> apply_granularity(std::span<const PreprocessedEntry> trace,
                                                 GranularityConfig cfg) {
    std::vector<PreprocessedEntry> out(trace.begin(), trace.end());
    if (cfg.shift == 0) return out;
    for (PreprocessedEntry& entry : out)
        if (entry.kind == EntryKind::MemAccess) entry.target.offset >>= cfg.shift;
    return out;
}

MIResult mi_from_counts(std::span<const size_t> class_sizes) {
    if (class_sizes.empty()) throw AnalysisError("empty class partition");
    MIResult result;
    result.class_sizes.assign(class_sizes.begin(), class_sizes.end());
    std::sort(result.class_sizes.begin(), result.class_sizes.end(), std::greater<>());
    size_t total = 0;
    for (size_t c : result.class_sizes) {
        if (c == 0) throw AnalysisError("class sizes must be positive");
        total += c;
    }
    const double n = static_cast<double>(total);
    double mi = 0.0;
    for (size_t c : result.class_sizes)
        mi += (static_cast<double>(c) / n) * std::log2(n / static_cast<double>(c));
    result.mi_bits = mi;
    result.max_bits = std::log2(n);
    result.class_count = result.class_sizes.size();
    result.min_entropy_bits = std::log2(static_cast<double>(result.class_count));
    return result;
}

// ---------------------------------------------------------------------------
// Trace comparison

namespace {

constexpr size_t kExcerptCap = 8;
constexpr size_t kResyncRun = 4;  // entries that must line up again to accept a resync

bool match_run(std::span<const PreprocessedEntry> a, size_t ia,
               std::span<const PreprocessedEntry> b, size_t jb) {
    size_t remaining_a = a.size() - ia;
    size_t remaining_b = b.size() - jb;
    if (remaining_a == 0 || remaining_b == 0) return remaining_a == 0 && remaining_b == 0;
    size_t run = std::min({kResyncRun, remaining_a, remaining_b});
    for (size_t r = 0; r < run; ++r)
        if (!(a[ia + r] == b[jb + r])) return false;
    return true;
}

DiffHunk make_hunk(std::span<const PreprocessedEntry> a, size_t a_begin, size_t a_end,
                   std::span<const PreprocessedEntry> b, size_t b_begin, size_t b_end) {
    DiffHunk hunk{a_begin, a_end, b_begin, b_end, {}, {}};
    for (size_t i = a_begin; i < std::min(a_end, a_begin + kExcerptCap); ++i)
        hunk.a_excerpt.push_back(a[i]);
    for (size_t j = b_begin; j < std::min(b_end, b_begin + kExcerptCap); ++j)
        hunk.b_excerpt.push_back(b[j]);
    return hunk;
}

}  // namespace

Divergence compare_traces(std::span<const PreprocessedEntry> a,
                          std::span<const PreprocessedEntry> b) {
    Divergence divergence;
    size_t common = std::min(a.size(), b.size());
    size_t first = common;
    bool found = false;
    for (size_t i = 0; i < common; ++i) {
        if (!(a[i] == b[i])) {
            first = i;
            found = true;
            break;
        }
    }
    if (!found && a.size() == b.size()) return divergence;  // identical
    divergence.first_diff_index = first;

    size_t i = first, j = first;
    while (i < a.size() || j < b.size()) {
        if (i < a.size() && j < b.size() && a[i] == b[j]) {
            ++i;
            ++j;
            continue;
        }
        // Find the nearest realignment within the window.
        bool resynced = false;
        size_t ri = 0, rj = 0;
        for (size_t k = 1; k <= 2 * kResyncWindow && !resynced; ++k) {
            for (size_t di = 0; di <= std::min(k, kResyncWindow); ++di) {
                size_t dj = k - di;
                if (dj > kResyncWindow) continue;
                if (i + di > a.size() || j + dj > b.size()) continue;
                if (match_run(a, i + di, b, j + dj)) {
                    ri = di;
                    rj = dj;
                    resynced = true;
                    break;
                }
            }
        }
        if (!resynced) {
            divergence.hunks.push_back(make_hunk(a, i, a.size(), b, j, b.size()));
            break;
        }
        divergence.hunks.push_back(make_hunk(a, i, i + ri, b, j, j + rj));
        i += ri;
        j += rj;
    }
    return divergence;
}

// ---------------------------------------------------------------------------
// Whole-trace MI

size_t default_checkpoint_interval(size_t max_trace_entries) {
    constexpr size_t kMaxCheckpoints = 100'000;
    if (max_trace_entries <= kMaxCheckpoints) return 1;
    return (max_trace_entries + kMaxCheckpoints - 1) / kMaxCheckpoints;
}

namespace {

std::vector<size_t> checkpoint_positions(size_t max_len, size_t interval) {
    std::vector<size_t> positions;
    for (size_t i = interval; i <= max_len; i += interval) positions.push_back(i);
    if (max_len > 0 && (positions.empty() || positions.back() != max_len))
        positions.push_back(max_len);
    return positions;
}

// Rolling hash of one trace, sampled at the requested prefix lengths. Traces
// shorter than a checkpoint keep contributing their final hash.
void prefix_hashes(TraceView trace, std::span<const size_t> positions,
                   std::span<uint64_t> hashes_out, uint64_t& final_out) {
    StateHash state;
    size_t next = 0;
    size_t count = 0;
    for (const PreprocessedEntry& entry : trace) {
        state = hash_entry(state, entry, 1);
        ++count;
        while (next < positions.size() && positions[next] == count)
            hashes_out[next++] = state.value;
    }
    while (next < positions.size()) hashes_out[next++] = state.value;
    final_out = state.value;
}

MIResult mi_from_hashes(std::span<const uint64_t> hashes) {
    std::unordered_map<uint64_t, size_t> counts;
    counts.reserve(hashes.size());
    for (uint64_t h : hashes) ++counts[h];
    std::vector<size_t> sizes;
    sizes.reserve(counts.size());
    for (const auto& [hash, count] : counts) sizes.push_back(count);
    return mi_from_counts(sizes);
}

size_t validated_interval(const std::vector<TraceView>& traces, size_t requested,
                          size_t& max_len_out) {
    if (traces.size() < 2) throw AnalysisError("whole-trace MI needs at least two test cases");
    size_t max_len = 0;
    for (TraceView t : traces) max_len = std::max(max_len, t.size());
    max_len_out = max_len;
    return requested == 0 ? default_checkpoint_interval(max_len) : requested;
}

}  // namespace

WholeTraceMI whole_trace_mi_serial(const std::vector<TraceView>& traces,
                                   size_t checkpoint_interval) {
    size_t max_len = 0;
    size_t interval = validated_interval(traces, checkpoint_interval, max_len);
    std::vector<size_t> positions = checkpoint_positions(max_len, interval);

    const size_t cases = traces.size();
    std::vector<uint64_t> hashes(cases * positions.size());
    std::vector<uint64_t> final_hashes(cases);
    for (size_t c = 0; c < cases; ++c)
        prefix_hashes(traces[c], positions,
                      std::span(hashes).subspan(c * positions.size(), positions.size()),
                      final_hashes[c]);

    WholeTraceMI result;
    result.checkpoint_interval = interval;
    result.curve.resize(positions.size());
    for (size_t p = 0; p < positions.size(); ++p) {
        std::vector<uint64_t> column(cases);
        for (size_t c = 0; c < cases; ++c) column[c] = hashes[c * positions.size() + p];
        result.curve[p] = MICurvePoint{positions[p], mi_from_hashes(column)};
    }
    result.final_result = mi_from_hashes(final_hashes);
    return result;
}

WholeTraceMI whole_trace_mi(const std::vector<TraceView>& traces, size_t checkpoint_interval) {
    size_t max_len = 0;
    size_t interval = validated_interval(traces, checkpoint_interval, max_len);
    std::vector<size_t> positions = checkpoint_positions(max_len, interval);

    const size_t cases = traces.size();
    const size_t npos = positions.size();
    std::vector<uint64_t> hashes(cases * npos);
    std::vector<uint64_t> final_hashes(cases);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cases); ++c)
        prefix_hashes(traces[static_cast<size_t>(c)], positions,
                      std::span(hashes).subspan(static_cast<size_t>(c) * npos, npos),
                      final_hashes[static_cast<size_t>(c)]);

    WholeTraceMI result;
    result.checkpoint_interval = interval;
    result.curve.resize(npos);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(npos); ++p) {
        std::vector<uint64_t> column(cases);
        for (size_t c = 0; c < cases; ++c) column[c] = hashes[c * npos + static_cast<size_t>(p)];
        result.curve[static_cast<size_t>(p)] =
            MICurvePoint{positions[static_cast<size_t>(p)], mi_from_hashes(column)};
    }
    result.final_result = mi_from_hashes(final_hashes);
    return result;
}

// ---------------------------------------------------------------------------
// Single-instruction MI

namespace {

struct KeyHash {
    size_t operator()(const InstructionKey& key) const {
        uint64_t h = key.ref.offset * 0x9e3779b97f4a7c15ULL;
        h ^= (static_cast<uint64_t>(key.ref.image_id) << 8) |
             static_cast<uint64_t>(key.leak_class);
        h *= 0xff51afd7ed558ccdULL;
        return static_cast<size_t>(h ^ (h >> 33));
    }
};

using CaseHashes = std::unordered_map<InstructionKey, StateHash, KeyHash>;

// Observation words per executed instruction: memory accesses chain
// (region tag, reduced offset), branches chain (branch kind + dst image,
// dst offset).
void chain_case(TraceView trace, GranularityConfig cfg, CaseHashes& out) {
    for (const PreprocessedEntry& entry : trace) {
        InstructionKey key;
        uint64_t w1, w2;
        if (entry.kind == EntryKind::MemAccess) {
            key = InstructionKey{entry.code, LeakClass::Memory};
            w1 = static_cast<uint64_t>(entry.target.region) |
                 (static_cast<uint64_t>(entry.target.id) << 8);
            w2 = entry.target.offset >> cfg.shift;
        } else {
            key = InstructionKey{entry.code, LeakClass::ControlFlow};
            w1 = static_cast<uint64_t>(entry.branch_kind()) |
                 (static_cast<uint64_t>(entry.target.id) << 8);
            w2 = entry.target.offset;
        }
        StateHash& state = out.try_emplace(key, StateHash{}).first->second;
        state = hash_chain(hash_chain(state, w1), w2);
    }
}

std::vector<InstructionMI> aggregate(std::vector<CaseHashes>& per_case) {
    const size_t cases = per_case.size();
    // Ordered so results and reports come out deterministically sorted.
    std::map<InstructionKey, std::unordered_map<uint64_t, size_t>> counts;
    std::map<InstructionKey, size_t> seen;
    for (size_t c = 0; c < cases; ++c) {
        for (const auto& [key, state] : per_case[c]) {
            ++counts[key][state.value];
            ++seen[key];
        }
    }
    std::vector<InstructionMI> results;
    results.reserve(counts.size());
    for (auto& [key, hash_counts] : counts) {
        size_t missing = cases - seen[key];
        if (missing > 0) hash_counts[kHashInit] += missing;  // never-executed cases
        std::vector<size_t> sizes;
        sizes.reserve(hash_counts.size());
        for (const auto& [hash, count] : hash_counts) sizes.push_back(count);
        results.push_back(InstructionMI{key, mi_from_counts(sizes)});
    }
    return results;
}

}  // namespace

std::vector<InstructionMI> instruction_mi_serial(const std::vector<TraceView>& traces,
                                                 GranularityConfig cfg) {
    if (traces.size() < 2)
        throw AnalysisError("single-instruction MI needs at least two test cases");
    std::vector<CaseHashes> per_case(traces.size());
    for (size_t c = 0; c < traces.size(); ++c) chain_case(traces[c], cfg, per_case[c]);
    return aggregate(per_case);
}

std::vector<InstructionMI> instruction_mi(const std::vector<TraceView>& traces,
                                          GranularityConfig cfg) {
    if (traces.size() < 2)
        throw AnalysisError("single-instruction MI needs at least two test cases");
    std::vector<CaseHashes> per_case(traces.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(traces.size()); ++c)
        chain_case(traces[static_cast<size_t>(c)], cfg, per_case[static_cast<size_t>(c)]);
    return aggregate(per_case);
}

std::vector<TraceView> trace_views(const std::vector<PreprocessedTrace>& traces) {
    std::vector<TraceView> views;
    views.reserve(traces.size());
    for (const PreprocessedTrace& trace : traces) views.emplace_back(trace.entries);
    return views;
}

}  // namespace leakscope

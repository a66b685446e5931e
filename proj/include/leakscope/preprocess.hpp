#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "leakscope/trace_format.hpp"

namespace leakscope {

struct PreprocessError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-fatal findings collected while preprocessing. Unknown-region accesses
// are kept in the entry stream and only counted here, so nothing that might
// leak is silently dropped.
struct PreprocessWarnings {
    size_t unknown_region_accesses = 0;
    size_t unmatched_frees = 0;
    size_t evicted_blocks = 0;       // address reuse without a matching Free
    size_t ignored_records = 0;      // records between TestcaseEnd and the next TestcaseStart
    std::vector<std::string> messages;

    void note(std::string message);
    void merge(const PreprocessWarnings& other);
};

// ---------------------------------------------------------------------------
// Allocation matching
//
// AllocSize records push onto a pending stack and AllocAddr pops it, so
// nested allocator self-calls match up. Block ids are assigned in allocation
// order and never reused; a freed-then-reallocated address gets a fresh id.

struct LiveBlock {
    uint32_t id = 0;
    uint64_t size = 0;
};

class AllocMap {
public:
    // Handles AllocSize, AllocAddr and Free records. AllocAddr with nothing
    // pending is a hard error; Free of an unknown address only warns.
    void match(const RawTraceRecord& record, PreprocessWarnings& warnings);

    // Live block covering addr -> (block id, offset within block).
    std::optional<std::pair<uint32_t, uint64_t>> classify(uint64_t addr) const;

    const std::map<uint64_t, LiveBlock>& live() const { return live_; }
    const std::vector<HeapBlockInfo>& all_blocks() const { return registered_; }

private:
    std::vector<uint64_t> pending_;
    std::map<uint64_t, LiveBlock> live_;         // base -> block
    std::vector<HeapBlockInfo> registered_;      // allocation order, frees included
    uint32_t next_id_ = 0;
};

// Stack classification relative to the high-water mark of the stack pointer.
// Offsets grow downward from the maximum sp observed so far, which is stable
// across runs with identical control flow. The window below the mark that
// still counts as stack is fixed at 2^20 bytes.
struct StackTracker {
    static constexpr uint64_t kWindow = uint64_t{1} << 20;

    bool seen = false;
    uint64_t sp = 0;
    uint64_t stack_base = 0;

    void update(uint64_t new_sp);
    std::optional<uint64_t> classify(uint64_t addr) const;  // -> downward offset
};

struct ImageInfo {
    uint16_t id = 0;
    uint64_t base = 0;
    uint64_t size = 0;
    std::string name;
};

class ImageTable {
public:
    void add(const RawTraceRecord& image_load);
    std::optional<std::pair<uint16_t, uint64_t>> classify(uint64_t addr) const;
    const std::vector<ImageInfo>& images() const { return images_; }
    std::vector<PreprocessedImage> header_images() const;

private:
    std::vector<ImageInfo> images_;  // sorted by base
};

// ---------------------------------------------------------------------------
// Splitting and relativization

struct TestcaseSegment {
    uint32_t id = 0;
    std::vector<RawTraceRecord> records;
};

struct TraceSplit {
    std::vector<RawTraceRecord> prefix;  // everything before the first TestcaseStart
    std::vector<TestcaseSegment> segments;
    size_t ignored_records = 0;          // between segments, dropped
};

// Splits a raw record stream at its test-case markers. Throws on interleaved
// or unbalanced markers and on duplicate test-case ids.
TraceSplit split_testcases(const std::vector<RawTraceRecord>& records);

// Converts one record sequence to layout-independent entries, updating the
// passed-in tables. Memory addresses classify as image, then live heap
// block, then stack window, and fall back to Unknown (kept and counted).
// Alloc/Free/StackPtr/ImageLoad records update the tables and produce no
// entries.
std::vector<PreprocessedEntry> relativize(const std::vector<RawTraceRecord>& records,
                                          AllocMap& allocs, StackTracker& stack,
                                          ImageTable& images, PreprocessWarnings& warnings);

struct PreprocessResult {
    std::vector<uint32_t> testcase_ids;       // segment order
    std::vector<PreprocessedTrace> traces;    // one per test case, prefix entries included
    PreprocessWarnings warnings;
};

// Full preprocessing pass: split, process the common prefix once, then
// relativize every segment against a snapshot of the prefix state. Segments
// are independent and processed in parallel.
PreprocessResult preprocess_trace(const std::vector<RawTraceRecord>& records);

}  // namespace leakscope

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace leakscope {

// ---------------------------------------------------------------------------
// Code and data references

enum class BranchKind : uint8_t {
    Jump = 0,
    CondTaken = 1,
    CondNotTaken = 2,
    Call = 3,
    Return = 4,
};

const char* to_string(BranchKind kind);

// Location of an instruction: image id plus byte offset from the image base.
struct AbsCodeRef {
    uint16_t image_id = 0;
    uint64_t offset = 0;

    friend bool operator==(const AbsCodeRef&, const AbsCodeRef&) = default;
    friend auto operator<=>(const AbsCodeRef&, const AbsCodeRef&) = default;
};

enum class RegionKind : uint8_t {
    Image = 0,
    Stack = 1,
    HeapBlock = 2,
    Unknown = 3,
};

const char* to_string(RegionKind kind);

// A data address in relative form. `id` holds the image id for Image regions
// and the block id for HeapBlock regions. Unknown regions keep the absolute
// address in `offset` and are flagged in reports instead of being dropped.
struct RegionRef {
    RegionKind region = RegionKind::Unknown;
    uint32_t id = 0;
    uint64_t offset = 0;

    friend bool operator==(const RegionRef&, const RegionRef&) = default;
};

// ---------------------------------------------------------------------------
// Raw trace records
//
// One instrumentation event in absolute-address form. Field slots are shared
// between record kinds (the same layout a flat trace entry buffer would use);
// the factory functions and accessors below give them their per-kind meaning.

enum class RecordKind : uint8_t {
    TestcaseStart = 0,
    TestcaseEnd = 1,
    ImageLoad = 2,
    AllocSize = 3,
    AllocAddr = 4,
    Free = 5,
    StackPtr = 6,
    Branch = 7,
    MemRead = 8,
    MemWrite = 9,
};

const char* to_string(RecordKind kind);

struct RawTraceRecord {
    RecordKind kind = RecordKind::TestcaseStart;
    BranchKind branch = BranchKind::Jump;  // Branch records only
    uint16_t image_a = 0;  // ImageLoad id / Branch src image / Mem* instr image
    uint16_t image_b = 0;  // Branch dst image
    uint32_t id = 0;       // TestcaseStart/TestcaseEnd id
    uint64_t a = 0;        // first payload slot (offset, address, size or sp)
    uint64_t b = 0;        // second payload slot
    std::string name;      // ImageLoad only

    static RawTraceRecord testcase_start(uint32_t id);
    static RawTraceRecord testcase_end(uint32_t id);
    static RawTraceRecord image_load(uint16_t image_id, uint64_t base, uint64_t size,
                                     std::string name);
    static RawTraceRecord alloc_size(uint64_t size);
    static RawTraceRecord alloc_addr(uint64_t addr);
    static RawTraceRecord free_addr(uint64_t addr);
    static RawTraceRecord stack_ptr(uint64_t sp);
    static RawTraceRecord make_branch(BranchKind branch, AbsCodeRef src, AbsCodeRef dst);
    static RawTraceRecord mem_read(AbsCodeRef instr, uint64_t addr);
    static RawTraceRecord mem_write(AbsCodeRef instr, uint64_t addr);

    AbsCodeRef src() const { return {image_a, a}; }    // Branch
    AbsCodeRef dst() const { return {image_b, b}; }    // Branch
    AbsCodeRef instr() const { return {image_a, a}; }  // MemRead/MemWrite
    uint64_t addr() const { return b; }                // MemRead/MemWrite
    uint64_t image_base() const { return a; }          // ImageLoad
    uint64_t image_size() const { return b; }          // ImageLoad
    uint64_t value() const { return a; }               // AllocSize/AllocAddr/Free/StackPtr

    friend bool operator==(const RawTraceRecord&, const RawTraceRecord&) = default;
};

std::string to_string(const RawTraceRecord& record);

// ---------------------------------------------------------------------------
// Preprocessed entries

enum class EntryKind : uint8_t {
    Branch = 0,
    MemAccess = 1,
};

enum class MemDir : uint8_t {
    Read = 0,
    Write = 1,
};

// A layout-independent trace entry. For branches, `target` is the destination
// code location expressed as an Image region; for memory accesses it is the
// classified data address.
struct PreprocessedEntry {
    EntryKind kind = EntryKind::Branch;
    uint8_t op = 0;      // BranchKind for branches, MemDir for memory accesses
    AbsCodeRef code;     // branch source / accessing instruction
    RegionRef target;

    static PreprocessedEntry make_branch(BranchKind branch, AbsCodeRef src, AbsCodeRef dst);
    static PreprocessedEntry mem_access(MemDir dir, AbsCodeRef instr, RegionRef addr);

    BranchKind branch_kind() const { return static_cast<BranchKind>(op); }
    MemDir mem_dir() const { return static_cast<MemDir>(op); }

    friend bool operator==(const PreprocessedEntry&, const PreprocessedEntry&) = default;
};

std::string to_string(const PreprocessedEntry& entry);

// ---------------------------------------------------------------------------
// Entry word encoding and the 64-bit hash chain

// Every entry encodes to exactly three words:
//   word 0: tag. Bits 0..1 entry kind, bits 2..4 sub-kind (branch kind or
//           read/write), bits 5..6 region kind (memory entries only). Bits
//           8..39 carry the id field: for branches src image id (bits 8..23)
//           and dst image id (bits 24..39); for memory accesses the region id
//           (image or heap block, bits 8..39). Bits 40..55 carry the accessing
//           instruction's image id for memory entries.
//   word 1: code offset (branch source / accessing instruction), unreduced.
//   word 2: branch destination offset (unreduced; control flow is resolved
//           per instruction) or data offset with the low log2(g) bits
//           discarded.
// The encoding is injective over entries that differ after granularity
// reduction.
std::array<uint64_t, 3> encode_entry(const PreprocessedEntry& entry, uint64_t granularity);

// Number of discarded low address bits for a granularity of g = 2^b bytes.
// Throws std::invalid_argument unless g is a power of two >= 1.
unsigned granularity_shift(uint64_t granularity);

inline constexpr uint64_t kHashInit = 0xcbf29ce484222325ULL;  // FNV-1a-64 offset basis
inline constexpr uint64_t kHashPrime = 0x100000001b3ULL;      // FNV-1a-64 prime

// Hash-chained compression of an execution-state sequence.
struct StateHash {
    uint64_t value = kHashInit;

    friend bool operator==(const StateHash&, const StateHash&) = default;
};

// Folds the eight little-endian bytes of `word` into the running state
// (FNV-1a-64). Fixed constants keep reports byte-identical across
// implementations and platforms.
inline StateHash hash_chain(StateHash state, uint64_t word) {
    uint64_t h = state.value;
    for (int i = 0; i < 8; ++i) {
        h ^= (word >> (8 * i)) & 0xFF;
        h *= kHashPrime;
    }
    return StateHash{h};
}

inline StateHash hash_entry(StateHash state, const PreprocessedEntry& entry,
                            uint64_t granularity) {
    for (uint64_t word : encode_entry(entry, granularity))
        state = hash_chain(state, word);
    return state;
}

// ---------------------------------------------------------------------------
// Trace files
//
// Raw trace file ("MWLK", version 1): little-endian throughout.
//   magic[4] version:u16 records...
//   record = kind:u8 payload, with payloads
//     TestcaseStart/End  id:u32
//     ImageLoad          id:u16 base:u64 size:u64 name_len:u16 name[name_len]
//     AllocSize/AllocAddr/Free/StackPtr  value:u64
//     Branch             branch_kind:u8 src_image:u16 src_off:u64 dst_image:u16 dst_off:u64
//     MemRead/MemWrite   instr_image:u16 instr_off:u64 addr:u64
//
// Preprocessed trace file ("MWPP", version 1):
//   magic[4] version:u16
//   image_count:u16  { id:u16 size:u64 name_len:u16 name[] }...
//   block_count:u32  { id:u32 size:u64 }...
//   common_prefix_entries:u64
//   entries... where entry = kind:u8 payload, with payloads
//     Branch     branch_kind:u8 src_image:u16 src_off:u64 dst_image:u16 dst_off:u64
//     MemAccess  dir:u8 instr_image:u16 instr_off:u64 region:u8 region_id:u32 offset:u64
// Preprocessed headers deliberately omit absolute image bases so files stay
// byte-identical under address-space randomization.

struct TraceFormatError : std::runtime_error {
    TraceFormatError(const std::string& message, size_t offset);
    size_t offset;
};

struct PreprocessedImage {
    uint16_t id = 0;
    uint64_t size = 0;
    std::string name;

    friend bool operator==(const PreprocessedImage&, const PreprocessedImage&) = default;
};

struct HeapBlockInfo {
    uint32_t id = 0;
    uint64_t size = 0;

    friend bool operator==(const HeapBlockInfo&, const HeapBlockInfo&) = default;
};

struct PreprocessedTrace {
    std::vector<PreprocessedImage> images;
    std::vector<HeapBlockInfo> blocks;  // every block registered while preprocessing
    uint64_t common_prefix_entries = 0;
    std::vector<PreprocessedEntry> entries;  // prefix entries first

    friend bool operator==(const PreprocessedTrace&, const PreprocessedTrace&) = default;
};

std::vector<std::byte> write_raw_trace(const std::vector<RawTraceRecord>& records);
std::vector<RawTraceRecord> read_raw_trace(const std::vector<std::byte>& bytes);

std::vector<std::byte> write_preprocessed_trace(const PreprocessedTrace& trace);
PreprocessedTrace read_preprocessed_trace(const std::vector<std::byte>& bytes);

void save_file(const std::string& path, const std::vector<std::byte>& bytes);
std::vector<std::byte> load_file(const std::string& path);

}  // namespace leakscope

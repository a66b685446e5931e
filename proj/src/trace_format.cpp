#include "leakscope/trace_format.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace leakscope {

const char* to_string(BranchKind kind) {
    switch (kind) {
        case BranchKind::Jump: return "jump";
        case BranchKind::CondTaken: return "cond-taken";
        case BranchKind::CondNotTaken: return "cond-not-taken";
        case BranchKind::Call: return "call";
        case BranchKind::Return: return "return";
    }
    return "?";
}

const char* to_string(RegionKind kind) {
    switch (kind) {
        case RegionKind::Image: return "image";
        case RegionKind::Stack: return "stack";
        case RegionKind::HeapBlock: return "heap";
        case RegionKind::Unknown: return "unknown";
    }
    return "?";
}

const char* to_string(RecordKind kind) {
    switch (kind) {
        case RecordKind::TestcaseStart: return "testcase-start";
        case RecordKind::TestcaseEnd: return "testcase-end";
        case RecordKind::ImageLoad: return "image-load";
        case RecordKind::AllocSize: return "alloc-size";
        case RecordKind::AllocAddr: return "alloc-addr";
        case RecordKind::Free: return "free";
        case RecordKind::StackPtr: return "stack-ptr";
        case RecordKind::Branch: return "branch";
        case RecordKind::MemRead: return "mem-read";
        case RecordKind::MemWrite: return "mem-write";
    }
    return "?";
}

RawTraceRecord RawTraceRecord::testcase_start(uint32_t id) {
    RawTraceRecord r;
    r.kind = RecordKind::TestcaseStart;
    r.id = id;
    return r;
}

RawTraceRecord RawTraceRecord::testcase_end(uint32_t id) {
    RawTraceRecord r;
    r.kind = RecordKind::TestcaseEnd;
    r.id = id;
    return r;
}

RawTraceRecord RawTraceRecord::image_load(uint16_t image_id, uint64_t base, uint64_t size,
                                          std::string name) {
    RawTraceRecord r;
    r.kind = RecordKind::ImageLoad;
    r.image_a = image_id;
    r.a = base;
    r.b = size;
    r.name = std::move(name);
    return r;
}

RawTraceRecord RawTraceRecord::alloc_size(uint64_t size) {
    RawTraceRecord r;
    r.kind = RecordKind::AllocSize;
    r.a = size;
    return r;
}

RawTraceRecord RawTraceRecord::alloc_addr(uint64_t addr) {
    RawTraceRecord r;
    r.kind = RecordKind::AllocAddr;
    r.a = addr;
    return r;
}

RawTraceRecord RawTraceRecord::free_addr(uint64_t addr) {
    RawTraceRecord r;
    r.kind = RecordKind::Free;
    r.a = addr;
    return r;
}

RawTraceRecord RawTraceRecord::stack_ptr(uint64_t sp) {
    RawTraceRecord r;
    r.kind = RecordKind::StackPtr;
    r.a = sp;
    return r;
}

RawTraceRecord RawTraceRecord::make_branch(BranchKind branch, AbsCodeRef src, AbsCodeRef dst) {
    RawTraceRecord r;
    r.kind = RecordKind::Branch;
    r.branch = branch;
    r.image_a = src.image_id;
    r.image_b = dst.image_id;
    r.a = src.offset;
    r.b = dst.offset;
    return r;
}

RawTraceRecord RawTraceRecord::mem_read(AbsCodeRef instr, uint64_t addr) {
    RawTraceRecord r;
    r.kind = RecordKind::MemRead;
    r.image_a = instr.image_id;
    r.a = instr.offset;
    r.b = addr;
    return r;
}

RawTraceRecord RawTraceRecord::mem_write(AbsCodeRef instr, uint64_t addr) {
    RawTraceRecord r = mem_read(instr, addr);
    r.kind = RecordKind::MemWrite;
    return r;
}

static std::string hex(uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

std::string to_string(const RawTraceRecord& r) {
    std::ostringstream os;
    os << to_string(r.kind);
    switch (r.kind) {
        case RecordKind::TestcaseStart:
        case RecordKind::TestcaseEnd:
            os << " " << r.id;
            break;
        case RecordKind::ImageLoad:
            os << " " << r.image_a << " \"" << r.name << "\" base=" << hex(r.a)
               << " size=" << hex(r.b);
            break;
        case RecordKind::AllocSize:
        case RecordKind::AllocAddr:
        case RecordKind::Free:
        case RecordKind::StackPtr:
            os << " " << hex(r.a);
            break;
        case RecordKind::Branch:
            os << " " << to_string(r.branch) << " " << r.image_a << ":" << hex(r.a) << " -> "
               << r.image_b << ":" << hex(r.b);
            break;
        case RecordKind::MemRead:
        case RecordKind::MemWrite:
            os << " " << r.image_a << ":" << hex(r.a) << " @ " << hex(r.b);
            break;
    }
    return os.str();
}

PreprocessedEntry PreprocessedEntry::make_branch(BranchKind branch, AbsCodeRef src,
                                                 AbsCodeRef dst) {
    PreprocessedEntry e;
    e.kind = EntryKind::Branch;
    e.op = static_cast<uint8_t>(branch);
    e.code = src;
    e.target = RegionRef{RegionKind::Image, dst.image_id, dst.offset};
    return e;
}

PreprocessedEntry PreprocessedEntry::mem_access(MemDir dir, AbsCodeRef instr, RegionRef addr) {
    PreprocessedEntry e;
    e.kind = EntryKind::MemAccess;
    e.op = static_cast<uint8_t>(dir);
    e.code = instr;
    e.target = addr;
    return e;
}

std::string to_string(const PreprocessedEntry& e) {
    std::ostringstream os;
    if (e.kind == EntryKind::Branch) {
        os << "branch " << to_string(e.branch_kind()) << " " << e.code.image_id << ":"
           << hex(e.code.offset) << " -> " << e.target.id << ":" << hex(e.target.offset);
    } else {
        os << (e.mem_dir() == MemDir::Read ? "read " : "write ") << e.code.image_id << ":"
           << hex(e.code.offset) << " [" << to_string(e.target.region);
        if (e.target.region == RegionKind::Image || e.target.region == RegionKind::HeapBlock)
            os << " " << e.target.id;
        os << " + " << hex(e.target.offset) << "]";
    }
    return os.str();
}

unsigned granularity_shift(uint64_t granularity) {
    if (granularity == 0 || !std::has_single_bit(granularity))
        throw std::invalid_argument("granularity must be a power of two >= 1, got " +
                                    std::to_string(granularity));
    return static_cast<unsigned>(std::countr_zero(granularity));
}

std::array<uint64_t, 3> encode_entry(const PreprocessedEntry& entry, uint64_t granularity) {
    const unsigned shift = granularity_shift(granularity);
    uint64_t tag = static_cast<uint64_t>(entry.kind) | (static_cast<uint64_t>(entry.op) << 2);
    uint64_t addr_word;
    if (entry.kind == EntryKind::Branch) {
        // Both image ids in bits 8..39; code offsets are never reduced.
        tag |= static_cast<uint64_t>(entry.code.image_id) << 8;
        tag |= static_cast<uint64_t>(entry.target.id) << 24;
        addr_word = entry.target.offset;
    } else {
        tag |= static_cast<uint64_t>(entry.target.region) << 5;
        tag |= static_cast<uint64_t>(entry.target.id) << 8;
        tag |= static_cast<uint64_t>(entry.code.image_id) << 40;
        addr_word = entry.target.offset >> shift;
    }
    return {tag, entry.code.offset, addr_word};
}

// ---------------------------------------------------------------------------
// Binary readers/writers

namespace {

constexpr char kRawMagic[4] = {'M', 'W', 'L', 'K'};
constexpr char kPreprocessedMagic[4] = {'M', 'W', 'P', 'P'};
constexpr uint16_t kFormatVersion = 1;

void put_u8(std::vector<std::byte>& out, uint8_t v) { out.push_back(std::byte{v}); }

void put_u16(std::vector<std::byte>& out, uint16_t v) {
    put_u8(out, static_cast<uint8_t>(v));
    put_u8(out, static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<std::byte>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) put_u8(out, static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::byte>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) put_u8(out, static_cast<uint8_t>(v >> (8 * i)));
}

void put_bytes(std::vector<std::byte>& out, const std::string& s) {
    for (char c : s) out.push_back(static_cast<std::byte>(c));
}

class Reader {
public:
    explicit Reader(const std::vector<std::byte>& bytes) : bytes_(bytes) {}

    size_t offset() const { return pos_; }
    bool done() const { return pos_ >= bytes_.size(); }

    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(bytes_[pos_++]);
    }

    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(bytes_[pos_]) |
                     static_cast<uint16_t>(static_cast<uint16_t>(bytes_[pos_ + 1]) << 8);
        pos_ += 2;
        return v;
    }

    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::string str(size_t len, const char* what) {
        need(len, what);
        std::string s;
        s.reserve(len);
        for (size_t i = 0; i < len; ++i) s.push_back(static_cast<char>(bytes_[pos_ + i]));
        pos_ += len;
        return s;
    }

    [[noreturn]] void fail(const std::string& message, size_t at) const {
        throw TraceFormatError(message, at);
    }

private:
    void need(size_t n, const char* what) const {
        if (pos_ + n > bytes_.size())
            throw TraceFormatError(std::string("truncated ") + what, pos_);
    }

    const std::vector<std::byte>& bytes_;
    size_t pos_ = 0;
};

void check_header(Reader& reader, const char magic[4], const char* format_name) {
    if (reader.done()) reader.fail(std::string("missing ") + format_name + " magic", 0);
    char seen[4];
    for (int i = 0; i < 4; ++i) seen[i] = static_cast<char>(reader.u8("magic"));
    if (std::memcmp(seen, magic, 4) != 0)
        reader.fail(std::string("bad magic, expected \"") + std::string(magic, 4) + "\"", 0);
    uint16_t version = reader.u16("version");
    if (version != kFormatVersion)
        reader.fail("unsupported version " + std::to_string(version), 4);
}

}  // namespace

TraceFormatError::TraceFormatError(const std::string& message, size_t offset)
    : std::runtime_error(message + " (at byte offset " + std::to_string(offset) + ")"),
      offset(offset) {}

std::vector<std::byte> write_raw_trace(const std::vector<RawTraceRecord>& records) {
    std::vector<std::byte> out;
    out.reserve(6 + records.size() * 20);
    put_bytes(out, std::string(kRawMagic, 4));
    put_u16(out, kFormatVersion);
    for (const RawTraceRecord& r : records) {
        put_u8(out, static_cast<uint8_t>(r.kind));
        switch (r.kind) {
            case RecordKind::TestcaseStart:
            case RecordKind::TestcaseEnd:
                put_u32(out, r.id);
                break;
            case RecordKind::ImageLoad:
                put_u16(out, r.image_a);
                put_u64(out, r.a);
                put_u64(out, r.b);
                put_u16(out, static_cast<uint16_t>(r.name.size()));
                put_bytes(out, r.name);
                break;
            case RecordKind::AllocSize:
            case RecordKind::AllocAddr:
            case RecordKind::Free:
            case RecordKind::StackPtr:
                put_u64(out, r.a);
                break;
            case RecordKind::Branch:
                put_u8(out, static_cast<uint8_t>(r.branch));
                put_u16(out, r.image_a);
                put_u64(out, r.a);
                put_u16(out, r.image_b);
                put_u64(out, r.b);
                break;
            case RecordKind::MemRead:
            case RecordKind::MemWrite:
                put_u16(out, r.image_a);
                put_u64(out, r.a);
                put_u64(out, r.b);
                break;
        }
    }
    return out;
}

std::vector<RawTraceRecord> read_raw_trace(const std::vector<std::byte>& bytes) {
    Reader reader(bytes);
    check_header(reader, kRawMagic, "raw trace");
    std::vector<RawTraceRecord> records;
    while (!reader.done()) {
        size_t record_offset = reader.offset();
        uint8_t kind_byte = reader.u8("record kind");
        if (kind_byte > static_cast<uint8_t>(RecordKind::MemWrite))
            reader.fail("unknown record kind " + std::to_string(kind_byte), record_offset);
        RawTraceRecord r;
        r.kind = static_cast<RecordKind>(kind_byte);
        switch (r.kind) {
            case RecordKind::TestcaseStart:
            case RecordKind::TestcaseEnd:
                r.id = reader.u32("testcase id");
                break;
            case RecordKind::ImageLoad: {
                r.image_a = reader.u16("image id");
                r.a = reader.u64("image base");
                r.b = reader.u64("image size");
                uint16_t name_len = reader.u16("image name length");
                r.name = reader.str(name_len, "image name");
                break;
            }
            case RecordKind::AllocSize:
            case RecordKind::AllocAddr:
            case RecordKind::Free:
            case RecordKind::StackPtr:
                r.a = reader.u64("record payload");
                break;
            case RecordKind::Branch: {
                uint8_t bk = reader.u8("branch kind");
                if (bk > static_cast<uint8_t>(BranchKind::Return))
                    reader.fail("unknown branch kind " + std::to_string(bk), record_offset);
                r.branch = static_cast<BranchKind>(bk);
                r.image_a = reader.u16("branch src image");
                r.a = reader.u64("branch src offset");
                r.image_b = reader.u16("branch dst image");
                r.b = reader.u64("branch dst offset");
                break;
            }
            case RecordKind::MemRead:
            case RecordKind::MemWrite:
                r.image_a = reader.u16("instr image");
                r.a = reader.u64("instr offset");
                r.b = reader.u64("memory address");
                break;
        }
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<std::byte> write_preprocessed_trace(const PreprocessedTrace& trace) {
    std::vector<std::byte> out;
    out.reserve(32 + trace.entries.size() * 28);
    put_bytes(out, std::string(kPreprocessedMagic, 4));
    put_u16(out, kFormatVersion);
    put_u16(out, static_cast<uint16_t>(trace.images.size()));
    for (const PreprocessedImage& img : trace.images) {
        put_u16(out, img.id);
        put_u64(out, img.size);
        put_u16(out, static_cast<uint16_t>(img.name.size()));
        put_bytes(out, img.name);
    }
    put_u32(out, static_cast<uint32_t>(trace.blocks.size()));
    for (const HeapBlockInfo& block : trace.blocks) {
        put_u32(out, block.id);
        put_u64(out, block.size);
    }
    put_u64(out, trace.common_prefix_entries);
    for (const PreprocessedEntry& e : trace.entries) {
        put_u8(out, static_cast<uint8_t>(e.kind));
        put_u8(out, e.op);
        put_u16(out, e.code.image_id);
        put_u64(out, e.code.offset);
        if (e.kind == EntryKind::Branch) {
            put_u16(out, static_cast<uint16_t>(e.target.id));
            put_u64(out, e.target.offset);
        } else {
            put_u8(out, static_cast<uint8_t>(e.target.region));
            put_u32(out, e.target.id);
            put_u64(out, e.target.offset);
        }
    }
    return out;
}

PreprocessedTrace read_preprocessed_trace(const std::vector<std::byte>& bytes) {
    Reader reader(bytes);
    check_header(reader, kPreprocessedMagic, "preprocessed trace");
    PreprocessedTrace trace;
    uint16_t image_count = reader.u16("image count");
    for (uint16_t i = 0; i < image_count; ++i) {
        PreprocessedImage img;
        img.id = reader.u16("image id");
        img.size = reader.u64("image size");
        uint16_t name_len = reader.u16("image name length");
        img.name = reader.str(name_len, "image name");
        trace.images.push_back(std::move(img));
    }
    uint32_t block_count = reader.u32("block count");
    std::unordered_set<uint32_t> block_ids;
    for (uint32_t i = 0; i < block_count; ++i) {
        HeapBlockInfo block;
        block.id = reader.u32("block id");
        block.size = reader.u64("block size");
        block_ids.insert(block.id);
        trace.blocks.push_back(block);
    }
    trace.common_prefix_entries = reader.u64("common prefix length");
    while (!reader.done()) {
        size_t entry_offset = reader.offset();
        uint8_t kind_byte = reader.u8("entry kind");
        if (kind_byte > static_cast<uint8_t>(EntryKind::MemAccess))
            reader.fail("unknown entry kind " + std::to_string(kind_byte), entry_offset);
        PreprocessedEntry e;
        e.kind = static_cast<EntryKind>(kind_byte);
        e.op = reader.u8("entry op");
        e.code.image_id = reader.u16("entry code image");
        e.code.offset = reader.u64("entry code offset");
        if (e.kind == EntryKind::Branch) {
            if (e.op > static_cast<uint8_t>(BranchKind::Return))
                reader.fail("unknown branch kind " + std::to_string(e.op), entry_offset);
            e.target.region = RegionKind::Image;
            e.target.id = reader.u16("branch dst image");
            e.target.offset = reader.u64("branch dst offset");
        } else {
            if (e.op > static_cast<uint8_t>(MemDir::Write))
                reader.fail("unknown memory direction " + std::to_string(e.op), entry_offset);
            uint8_t region = reader.u8("region kind");
            if (region > static_cast<uint8_t>(RegionKind::Unknown))
                reader.fail("unknown region kind " + std::to_string(region), entry_offset);
            e.target.region = static_cast<RegionKind>(region);
            e.target.id = reader.u32("region id");
            e.target.offset = reader.u64("region offset");
            if (e.target.region == RegionKind::HeapBlock && !block_ids.contains(e.target.id))
                reader.fail("entry references absent heap block id " +
                                std::to_string(e.target.id),
                            entry_offset);
        }
        trace.entries.push_back(e);
    }
    return trace;
}

void save_file(const std::string& path, const std::vector<std::byte>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::byte> load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::streamsize size = in.tellg();
    in.seekg(0);
    std::vector<std::byte> bytes(static_cast<size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw std::runtime_error("read failed: " + path);
    return bytes;
}

}  // namespace leakscope

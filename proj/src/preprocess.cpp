#include "leakscope/preprocess.hpp"

#include <algorithm>
#include <exception>
#include <sstream>
#include <unordered_set>

namespace leakscope {

namespace {
constexpr size_t kMaxWarningMessages = 64;
}

void PreprocessWarnings::note(std::string message) {
    if (messages.size() < kMaxWarningMessages) messages.push_back(std::move(message));
}

void PreprocessWarnings::merge(const PreprocessWarnings& other) {
    unknown_region_accesses += other.unknown_region_accesses;
    unmatched_frees += other.unmatched_frees;
    evicted_blocks += other.evicted_blocks;
    ignored_records += other.ignored_records;
    for (const std::string& m : other.messages) note(m);
}

// ---------------------------------------------------------------------------
// AllocMap

void AllocMap::match(const RawTraceRecord& record, PreprocessWarnings& warnings) {
    switch (record.kind) {
        case RecordKind::AllocSize:
            pending_.push_back(record.value());
            break;
        case RecordKind::AllocAddr: {
            if (pending_.empty())
                throw PreprocessError("allocation address 0x" +
                                      [&] {
                                          std::ostringstream os;
                                          os << std::hex << record.value();
                                          return os.str();
                                      }() +
                                      " without a pending allocation size");
            uint64_t size = pending_.back();
            pending_.pop_back();
            uint64_t base = record.value();
            uint64_t end = base + size < base ? UINT64_MAX : base + size;
            // Address reuse without an observed Free: evict the stale blocks
            // so live ranges stay disjoint.
            auto it = live_.lower_bound(base);
            while (it != live_.end() && (it->first < end || it->first == base)) {
                warnings.evicted_blocks++;
                it = live_.erase(it);
            }
            while (it != live_.begin()) {
                auto prev = std::prev(it);
                uint64_t prev_end = prev->first + prev->second.size;
                if (prev_end < prev->first) prev_end = UINT64_MAX;
                if (prev_end <= base) break;
                warnings.evicted_blocks++;
                it = live_.erase(prev);
            }
            live_[base] = LiveBlock{next_id_, size};
            registered_.push_back(HeapBlockInfo{next_id_, size});
            ++next_id_;
            break;
        }
        case RecordKind::Free: {
            uint64_t addr = record.value();
            auto exact = live_.find(addr);
            if (exact != live_.end()) {
                live_.erase(exact);
                break;
            }
            auto it = live_.upper_bound(addr);
            if (it != live_.begin()) {
                --it;
                if (addr < it->first + it->second.size) {
                    live_.erase(it);
                    break;
                }
            }
            warnings.unmatched_frees++;
            break;
        }
        default:
            throw PreprocessError("AllocMap cannot process record kind " +
                                  std::string(to_string(record.kind)));
    }
}

std::optional<std::pair<uint32_t, uint64_t>> AllocMap::classify(uint64_t addr) const {
    auto it = live_.upper_bound(addr);
    if (it == live_.begin()) return std::nullopt;
    --it;
    uint64_t end = it->first + it->second.size;
    if (end < it->first) end = UINT64_MAX;
    if (addr < end) return std::make_pair(it->second.id, addr - it->first);
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// StackTracker / ImageTable

void StackTracker::update(uint64_t new_sp) {
    sp = new_sp;
    stack_base = seen ? std::max(stack_base, new_sp) : new_sp;
    seen = true;
}

std::optional<uint64_t> StackTracker::classify(uint64_t addr) const {
    if (!seen) return std::nullopt;
    if (addr > stack_base || stack_base - addr > kWindow) return std::nullopt;
    return stack_base - addr;
}

void ImageTable::add(const RawTraceRecord& image_load) {
    ImageInfo info{image_load.image_a, image_load.image_base(), image_load.image_size(),
                   image_load.name};
    auto it = std::lower_bound(images_.begin(), images_.end(), info.base,
                               [](const ImageInfo& img, uint64_t base) { return img.base < base; });
    images_.insert(it, std::move(info));
}

std::optional<std::pair<uint16_t, uint64_t>> ImageTable::classify(uint64_t addr) const {
    auto it = std::upper_bound(images_.begin(), images_.end(), addr,
                               [](uint64_t a, const ImageInfo& img) { return a < img.base; });
    if (it == images_.begin()) return std::nullopt;
    --it;
    if (addr < it->base + it->size) return std::make_pair(it->id, addr - it->base);
    return std::nullopt;
}

std::vector<PreprocessedImage> ImageTable::header_images() const {
    std::vector<PreprocessedImage> out;
    out.reserve(images_.size());
    for (const ImageInfo& img : images_) out.push_back({img.id, img.size, img.name});
    std::sort(out.begin(), out.end(),
              [](const PreprocessedImage& a, const PreprocessedImage& b) { return a.id < b.id; });
    return out;
}

// ---------------------------------------------------------------------------
// Splitting

TraceSplit split_testcases(const std::vector<RawTraceRecord>& records) {
    TraceSplit split;
    std::unordered_set<uint32_t> seen_ids;
    bool any_case = false;
    bool open = false;
    uint32_t open_id = 0;
    for (const RawTraceRecord& record : records) {
        if (record.kind == RecordKind::TestcaseStart) {
            if (open)
                throw PreprocessError("interleaved test-case markers: start of case " +
                                      std::to_string(record.id) + " while case " +
                                      std::to_string(open_id) + " is open");
            if (!seen_ids.insert(record.id).second)
                throw PreprocessError("duplicate test-case id " + std::to_string(record.id));
            open = true;
            any_case = true;
            open_id = record.id;
            split.segments.push_back(TestcaseSegment{record.id, {}});
            continue;
        }
        if (record.kind == RecordKind::TestcaseEnd) {
            if (!open || record.id != open_id)
                throw PreprocessError("unbalanced test-case markers: end of case " +
                                      std::to_string(record.id) +
                                      (open ? " while case " + std::to_string(open_id) + " is open"
                                            : " without a start"));
            open = false;
            continue;
        }
        if (open)
            split.segments.back().records.push_back(record);
        else if (!any_case)
            split.prefix.push_back(record);
        else
            split.ignored_records++;  // between cases; setup state lives in the prefix
    }
    if (open)
        throw PreprocessError("unbalanced test-case markers: case " + std::to_string(open_id) +
                              " never ends");
    return split;
}

// ---------------------------------------------------------------------------
// Relativization

std::vector<PreprocessedEntry> relativize(const std::vector<RawTraceRecord>& records,
                                          AllocMap& allocs, StackTracker& stack,
                                          ImageTable& images, PreprocessWarnings& warnings) {
    std::vector<PreprocessedEntry> entries;
    entries.reserve(records.size());
    for (const RawTraceRecord& record : records) {
        switch (record.kind) {
            case RecordKind::Branch:
                entries.push_back(
                    PreprocessedEntry::make_branch(record.branch, record.src(), record.dst()));
                break;
            case RecordKind::MemRead:
            case RecordKind::MemWrite: {
                uint64_t addr = record.addr();
                RegionRef region;
                if (auto image = images.classify(addr)) {
                    region = RegionRef{RegionKind::Image, image->first, image->second};
                } else if (auto block = allocs.classify(addr)) {
                    region = RegionRef{RegionKind::HeapBlock, block->first, block->second};
                } else if (auto stack_off = stack.classify(addr)) {
                    region = RegionRef{RegionKind::Stack, 0, *stack_off};
                } else {
                    region = RegionRef{RegionKind::Unknown, 0, addr};
                    warnings.unknown_region_accesses++;
                    if (warnings.unknown_region_accesses == 1) {
                        std::ostringstream os;
                        os << "access to unclassified address 0x" << std::hex << addr
                           << " (first occurrence)";
                        warnings.note(os.str());
                    }
                }
                entries.push_back(PreprocessedEntry::mem_access(
                    record.kind == RecordKind::MemRead ? MemDir::Read : MemDir::Write,
                    record.instr(), region));
                break;
            }
            case RecordKind::AllocSize:
            case RecordKind::AllocAddr:
            case RecordKind::Free:
                allocs.match(record, warnings);
                break;
            case RecordKind::StackPtr:
                stack.update(record.value());
                break;
            case RecordKind::ImageLoad:
                images.add(record);
                break;
            case RecordKind::TestcaseStart:
            case RecordKind::TestcaseEnd:
                throw PreprocessError("unexpected test-case marker inside a segment");
        }
    }
    return entries;
}

PreprocessResult preprocess_trace(const std::vector<RawTraceRecord>& records) {
    TraceSplit split = split_testcases(records);

    // The prefix is processed once; every segment starts from a snapshot of
    // the resulting tables.
    PreprocessResult result;
    result.warnings.ignored_records = split.ignored_records;
    AllocMap prefix_allocs;
    StackTracker prefix_stack;
    ImageTable prefix_images;
    std::vector<PreprocessedEntry> prefix_entries =
        relativize(split.prefix, prefix_allocs, prefix_stack, prefix_images, result.warnings);

    result.testcase_ids.resize(split.segments.size());
    result.traces.resize(split.segments.size());
    std::vector<PreprocessWarnings> segment_warnings(split.segments.size());
    std::exception_ptr first_error;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(split.segments.size()); ++i) {
        try {
            const TestcaseSegment& segment = split.segments[static_cast<size_t>(i)];
            AllocMap allocs = prefix_allocs;
            StackTracker stack = prefix_stack;
            ImageTable images = prefix_images;
            std::vector<PreprocessedEntry> entries = relativize(
                segment.records, allocs, stack, images, segment_warnings[static_cast<size_t>(i)]);

            PreprocessedTrace trace;
            trace.images = images.header_images();
            trace.blocks = allocs.all_blocks();
            trace.common_prefix_entries = prefix_entries.size();
            trace.entries.reserve(prefix_entries.size() + entries.size());
            trace.entries = prefix_entries;
            trace.entries.insert(trace.entries.end(), std::make_move_iterator(entries.begin()),
                                 std::make_move_iterator(entries.end()));
            result.testcase_ids[static_cast<size_t>(i)] = segment.id;
            result.traces[static_cast<size_t>(i)] = std::move(trace);
        } catch (...) {
#pragma omp critical(leakscope_preprocess_error)
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);
    for (const PreprocessWarnings& w : segment_warnings) result.warnings.merge(w);
    return result;
}

}  // namespace leakscope

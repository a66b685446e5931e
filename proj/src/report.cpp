#include "leakscope/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace leakscope {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string hex_u64(uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

// Human-readable fixed precision for the text report.
std::string fixed6(double v) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), "%.6f", v);
    return buffer;
}

// Shortest round-trip representation; parsing the CSV value back yields
// exactly the double the analysis produced.
std::string shortest(double v) {
    char buffer[64];
    auto [end, ec] = std::to_chars(buffer, buffer + sizeof(buffer), v);
    return std::string(buffer, end);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ReportError("cannot open for writing: " + path);
    out << content;
    if (!out) throw ReportError("write failed: " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// SymbolMap

void SymbolMap::add_map_file(uint16_t image_id, const std::string& path,
                             std::vector<std::string>& warnings) {
    std::ifstream in(path);
    if (!in) throw ReportError("cannot open map file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view(line);
        while (!view.empty() && std::isspace(static_cast<unsigned char>(view.front())))
            view.remove_prefix(1);
        while (!view.empty() && std::isspace(static_cast<unsigned char>(view.back())))
            view.remove_suffix(1);
        if (view.empty()) continue;
        size_t space = view.find_first_of(" \t");
        if (space == std::string_view::npos) {
            warnings.push_back(path + " line " + std::to_string(line_no) +
                               ": expected \"HEXOFFSET NAME\", skipped");
            continue;
        }
        std::string_view offset_text = view.substr(0, space);
        if (offset_text.starts_with("0x") || offset_text.starts_with("0X"))
            offset_text.remove_prefix(2);
        uint64_t offset = 0;
        auto [ptr, ec] = std::from_chars(offset_text.data(), offset_text.data() + offset_text.size(),
                                         offset, 16);
        if (ec != std::errc{} || ptr != offset_text.data() + offset_text.size()) {
            warnings.push_back(path + " line " + std::to_string(line_no) + ": bad hex offset '" +
                               std::string(view.substr(0, space)) + "', skipped");
            continue;
        }
        std::string_view name = view.substr(space);
        while (!name.empty() && std::isspace(static_cast<unsigned char>(name.front())))
            name.remove_prefix(1);
        if (name.empty()) {
            warnings.push_back(path + " line " + std::to_string(line_no) +
                               ": missing symbol name, skipped");
            continue;
        }
        images_[image_id].emplace_back(offset, std::string(name));
    }
    finalize(image_id);
}

void SymbolMap::add_symbol(uint16_t image_id, uint64_t offset, std::string name) {
    images_[image_id].emplace_back(offset, std::move(name));
    finalize(image_id);
}

void SymbolMap::finalize(uint16_t image_id) {
    auto& symbols = images_[image_id];
    std::sort(symbols.begin(), symbols.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 1; i < symbols.size(); ++i)
        if (symbols[i].first == symbols[i - 1].first)
            throw ReportError("image " + std::to_string(image_id) + ": duplicate symbol offset " +
                              hex_u64(symbols[i].first) + " (offsets must be strictly increasing)");
}

std::string SymbolMap::symbolize(AbsCodeRef ref) const {
    auto image = images_.find(ref.image_id);
    if (image != images_.end() && !image->second.empty()) {
        const auto& symbols = image->second;
        auto it = std::upper_bound(symbols.begin(), symbols.end(), ref.offset,
                                   [](uint64_t off, const auto& sym) { return off < sym.first; });
        if (it != symbols.begin()) {
            --it;
            uint64_t delta = ref.offset - it->first;
            if (delta == 0) return it->second;
            return it->second + "+" + hex_u64(delta);
        }
    }
    return hex_u64(ref.offset);
}

// ---------------------------------------------------------------------------
// Divergence formatting

namespace {

std::string entry_text(const PreprocessedEntry& entry, const SymbolMap& symbols) {
    std::ostringstream os;
    auto code = [&](AbsCodeRef ref) {
        return std::to_string(ref.image_id) + ":" + symbols.symbolize(ref);
    };
    if (entry.kind == EntryKind::Branch) {
        os << "branch " << to_string(entry.branch_kind()) << " " << code(entry.code) << " -> "
           << code(AbsCodeRef{static_cast<uint16_t>(entry.target.id), entry.target.offset});
    } else {
        os << (entry.mem_dir() == MemDir::Read ? "read  " : "write ") << code(entry.code) << " ["
           << to_string(entry.target.region);
        if (entry.target.region == RegionKind::Image ||
            entry.target.region == RegionKind::HeapBlock)
            os << " " << entry.target.id;
        os << " + " << hex_u64(entry.target.offset) << "]";
    }
    return os.str();
}

}  // namespace

std::string format_divergence(const Divergence& divergence, uint32_t case_a, uint32_t case_b,
                              const SymbolMap& symbols) {
    std::ostringstream os;
    os << "trace diff: case " << case_a << " vs case " << case_b << "\n";
    if (divergence.identical()) {
        os << "traces identical\n";
        return os.str();
    }
    os << "first difference at entry " << *divergence.first_diff_index << "\n";
    for (const DiffHunk& hunk : divergence.hunks) {
        os << "hunk a[" << hunk.a_begin << ".." << hunk.a_end << ") b[" << hunk.b_begin << ".."
           << hunk.b_end << ")\n";
        for (const PreprocessedEntry& e : hunk.a_excerpt)
            os << "  - " << entry_text(e, symbols) << "\n";
        if (hunk.a_excerpt.size() < hunk.a_end - hunk.a_begin)
            os << "  - ... (" << (hunk.a_end - hunk.a_begin - hunk.a_excerpt.size())
               << " more)\n";
        for (const PreprocessedEntry& e : hunk.b_excerpt)
            os << "  + " << entry_text(e, symbols) << "\n";
        if (hunk.b_excerpt.size() < hunk.b_end - hunk.b_begin)
            os << "  + ... (" << (hunk.b_end - hunk.b_begin - hunk.b_excerpt.size())
               << " more)\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Report emission

namespace {

ordered_json mi_to_json(const MIResult& result, bool with_sizes) {
    ordered_json j;
    j["mi_bits"] = result.mi_bits;
    j["max_bits"] = result.max_bits;
    j["min_entropy_bits"] = result.min_entropy_bits;
    j["class_count"] = result.class_count;
    if (with_sizes) j["class_sizes"] = result.class_sizes;
    return j;
}

std::string source_name(const PipelineConfig& config) {
    if (!config.raw_input.empty()) return "ingested";
    if (!config.input_dir.empty()) return "directory";
    if (!config.template_hex.empty()) return "template";
    return "random";
}

}  // namespace

void emit_reports(const AnalysisBundle& bundle, const PipelineConfig& config,
                  const SymbolMap& symbols) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    if (ec) throw ReportError("cannot create output directory " + config.out_dir);

    const size_t cases = bundle.testcase_ids.size();
    size_t flagged = 0;
    for (const InstructionMI& instr : bundle.instructions)
        if (instr.result.mi_bits > 0.0) ++flagged;

    // --- report.json (always complete; the threshold only filters the text) ---
    ordered_json j;
    j["schema_version"] = 1;
    j["tool"] = "leakscope";
    {
        ordered_json cfg;
        cfg["program"] = config.program;
        cfg["raw_input"] = config.raw_input;
        cfg["testcase_source"] = source_name(config);
        cfg["n"] = cases;
        cfg["len"] = config.len;
        cfg["seed"] = config.seed;
        cfg["template"] = config.template_hex;
        cfg["input_dir"] = config.input_dir;
        cfg["granularity"] = config.granularity;
        cfg["checkpoint_interval"] = bundle.whole_trace.checkpoint_interval;
        cfg["rand_override"] = config.rand_override;
        ordered_json features = ordered_json::object();
        for (const auto& [k, v] : config.features) features[std::to_string(k)] = v;
        cfg["features"] = features;
        cfg["threshold"] = config.threshold;
        cfg["run_nonce"] = config.run_nonce;
        j["config"] = cfg;
    }
    {
        ordered_json images = ordered_json::array();
        for (const PreprocessedImage& img : bundle.images) {
            ordered_json image;
            image["id"] = img.id;
            image["name"] = img.name;
            image["size"] = img.size;
            images.push_back(image);
        }
        j["images"] = images;
    }
    j["testcases"] = bundle.testcase_ids;
    {
        ordered_json warnings;
        warnings["unknown_region_accesses"] = bundle.warnings.unknown_region_accesses;
        warnings["unmatched_frees"] = bundle.warnings.unmatched_frees;
        warnings["evicted_blocks"] = bundle.warnings.evicted_blocks;
        warnings["ignored_records"] = bundle.warnings.ignored_records;
        warnings["messages"] = bundle.warnings.messages;
        j["warnings"] = warnings;
    }
    {
        ordered_json whole;
        whole["checkpoint_interval"] = bundle.whole_trace.checkpoint_interval;
        whole["final"] = mi_to_json(bundle.whole_trace.final_result, true);
        ordered_json curve = ordered_json::array();
        for (const MICurvePoint& point : bundle.whole_trace.curve)
            curve.push_back({point.prefix_entries, point.result.mi_bits});
        whole["curve"] = curve;
        j["whole_trace"] = whole;
    }
    {
        ordered_json instructions = ordered_json::array();
        for (const InstructionMI& instr : bundle.instructions) {
            ordered_json row;
            row["image_id"] = instr.key.ref.image_id;
            row["offset"] = hex_u64(instr.key.ref.offset);
            row["symbol"] = symbols.symbolize(instr.key.ref);
            row["leak_class"] = to_string(instr.key.leak_class);
            row["mi_bits"] = instr.result.mi_bits;
            row["max_bits"] = instr.result.max_bits;
            row["min_entropy_bits"] = instr.result.min_entropy_bits;
            row["class_count"] = instr.result.class_count;
            instructions.push_back(row);
        }
        j["instructions"] = instructions;
        j["flagged_count"] = flagged;

        // The tables' per-subroutine style rollup, reduced to images: the
        // worst instruction score per image.
        std::map<uint16_t, double> image_max;
        for (const InstructionMI& instr : bundle.instructions) {
            auto [it, inserted] = image_max.emplace(instr.key.ref.image_id, instr.result.mi_bits);
            if (!inserted) it->second = std::max(it->second, instr.result.mi_bits);
        }
        ordered_json rollup = ordered_json::array();
        for (const auto& [image_id, max_mi] : image_max) {
            ordered_json row;
            row["image_id"] = image_id;
            row["max_mi_bits"] = max_mi;
            rollup.push_back(row);
        }
        j["image_max"] = rollup;
    }
    {
        ordered_json preprocess;
        preprocess["stack_window_bytes"] = StackTracker::kWindow;
        preprocess["stack_anchor"] =
            "high-water mark of the stack pointer; offsets grow downward from it";
        j["preprocess"] = preprocess;
    }
    {
        ordered_json diffs = ordered_json::array();
        for (const DiffRecord& diff : bundle.diffs) {
            ordered_json row;
            row["case_a"] = diff.case_a;
            row["case_b"] = diff.case_b;
            row["identical"] = diff.divergence.identical();
            if (diff.divergence.first_diff_index)
                row["first_diff_index"] = *diff.divergence.first_diff_index;
            row["hunk_count"] = diff.divergence.hunks.size();
            diffs.push_back(row);
        }
        j["divergences"] = diffs;
    }
    {
        // Scores treat equal hashes as equal states; with 64-bit hashes the
        // per-target collision probability stays negligible at this scale.
        ordered_json note;
        note["hash_bits"] = 64;
        note["cases"] = cases;
        double pairs = 0.5 * static_cast<double>(cases) * static_cast<double>(cases ? cases - 1 : 0);
        note["collision_probability_bound"] = pairs * std::pow(2.0, -64.0);
        j["hash_note"] = note;
    }
    write_text_file(config.out_dir + "/report.json", j.dump(2) + "\n");

    // --- report.txt ---
    {
        std::ostringstream os;
        os << "leakage report\n";
        os << "==============\n";
        if (!config.program.empty()) os << "program:            " << config.program << "\n";
        if (!config.raw_input.empty()) os << "raw input:          " << config.raw_input << "\n";
        os << "test cases:         " << cases << " (" << source_name(config);
        if (config.raw_input.empty() && config.input_dir.empty())
            os << ", length " << config.len << ", seed " << config.seed;
        os << ")\n";
        os << "granularity:        " << config.granularity << " byte(s)\n";
        os << "run nonce:          " << config.run_nonce << "\n";
        if (config.rand_override == "derive")
            os << "randomness:         per-case derived streams; scores measure leakage about "
                  "(input, randomness) jointly\n";
        else
            os << "randomness:         fixed override list; scores measure leakage about the "
                  "secret inputs directly\n";
        os << "\n";
        const MIResult& final_result = bundle.whole_trace.final_result;
        os << "whole-trace MI:     " << fixed6(final_result.mi_bits) << " / "
           << fixed6(final_result.max_bits) << " bits  (classes: " << final_result.class_count
           << ", min-entropy: " << fixed6(final_result.min_entropy_bits) << ")\n\n";

        std::vector<const InstructionMI*> visible;
        for (const InstructionMI& instr : bundle.instructions)
            if (instr.result.mi_bits > config.threshold) visible.push_back(&instr);
        std::sort(visible.begin(), visible.end(), [](const InstructionMI* a, const InstructionMI* b) {
            if (a->result.mi_bits != b->result.mi_bits) return a->result.mi_bits > b->result.mi_bits;
            return a->key < b->key;
        });
        os << "flagged instructions (mi_bits > " << fixed6(config.threshold)
           << "): " << visible.size() << "\n";
        for (const InstructionMI* instr : visible) {
            std::string location = std::to_string(instr->key.ref.image_id) + ":" +
                                   hex_u64(instr->key.ref.offset);
            os << "  " << std::left << std::setw(14) << location << std::setw(24)
               << symbols.symbolize(instr->key.ref) << std::setw(14)
               << to_string(instr->key.leak_class) << std::right << fixed6(instr->result.mi_bits)
               << " / " << fixed6(instr->result.max_bits)
               << "  (min-entropy " << fixed6(instr->result.min_entropy_bits) << ")\n";
        }
        std::map<uint16_t, double> image_max;
        for (const InstructionMI& instr : bundle.instructions) {
            auto [it, inserted] = image_max.emplace(instr.key.ref.image_id, instr.result.mi_bits);
            if (!inserted) it->second = std::max(it->second, instr.result.mi_bits);
        }
        for (const auto& [image_id, max_mi] : image_max) {
            std::string name = "image " + std::to_string(image_id);
            for (const PreprocessedImage& img : bundle.images)
                if (img.id == image_id && !img.name.empty()) name += " (" + img.name + ")";
            os << "  worst instruction in " << name << ": " << fixed6(max_mi) << " bits\n";
        }
        os << "\n";
        if (!bundle.diffs.empty()) {
            size_t differing = 0;
            for (const DiffRecord& diff : bundle.diffs)
                if (!diff.divergence.identical()) ++differing;
            os << "trace comparisons:  " << bundle.diffs.size() << " pair(s), " << differing
               << " differing\n";
        }
        os << "unknown-region accesses: " << bundle.warnings.unknown_region_accesses << "\n";
        if (bundle.warnings.unmatched_frees)
            os << "unmatched frees:    " << bundle.warnings.unmatched_frees << "\n";
        if (bundle.warnings.evicted_blocks)
            os << "evicted blocks:     " << bundle.warnings.evicted_blocks << "\n";
        write_text_file(config.out_dir + "/report.txt", os.str());
    }

    // --- annotations.csv (complete, disassembler-import friendly) ---
    {
        std::ostringstream os;
        os << "image_id,offset,symbol,mi_bits,max_bits,min_entropy_bits,leak_class\n";
        for (const InstructionMI& instr : bundle.instructions) {
            std::string symbol = symbols.symbolize(instr.key.ref);
            for (char& c : symbol)
                if (c == ',') c = ';';
            os << instr.key.ref.image_id << "," << hex_u64(instr.key.ref.offset) << "," << symbol
               << "," << shortest(instr.result.mi_bits) << "," << shortest(instr.result.max_bits)
               << "," << shortest(instr.result.min_entropy_bits) << ","
               << to_string(instr.key.leak_class) << "\n";
        }
        write_text_file(config.out_dir + "/annotations.csv", os.str());
    }

    // --- per-pair diff files ---
    for (const DiffRecord& diff : bundle.diffs) {
        std::string path = config.out_dir + "/diff_" + std::to_string(diff.case_a) + "_" +
                           std::to_string(diff.case_b) + ".txt";
        write_text_file(path, format_divergence(diff.divergence, diff.case_a, diff.case_b, symbols));
    }
}

}  // namespace leakscope

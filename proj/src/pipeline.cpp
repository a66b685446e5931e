#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "leakscope/report.hpp"

namespace leakscope {

namespace fs = std::filesystem;

std::string testcases_dir(const PipelineConfig& config) { return config.out_dir + "/testcases"; }
std::string raw_trace_path(const PipelineConfig& config) { return config.out_dir + "/raw.trace"; }
std::string preprocessed_dir(const PipelineConfig& config) {
    return config.out_dir + "/preprocessed";
}

namespace {

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw std::runtime_error("cannot create directory " + path);
}

std::string case_filename(uint32_t id, const char* extension) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "case_%05u%s", id, extension);
    return buffer;
}

template <typename F>
auto stage(const char* name, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

void validate_config(const PipelineConfig& config) {
    try {
        granularity_shift(config.granularity);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (config.out_dir.empty()) throw ConfigError("output directory must not be empty");
}

}  // namespace

Overrides overrides_from_config(const PipelineConfig& config) {
    Overrides overrides;
    overrides.seed = config.seed;
    overrides.features = config.features;
    if (config.rand_override != "derive") {
        std::string_view rest = config.rand_override;
        while (!rest.empty()) {
            size_t comma = rest.find(',');
            std::string_view token = rest.substr(0, comma);
            rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
            if (token.starts_with("0x") || token.starts_with("0X")) token.remove_prefix(2);
            uint64_t value = 0;
            auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value, 16);
            if (token.empty() || ec != std::errc{} || ptr != token.data() + token.size())
                throw ConfigError("--rand-override expects \"derive\" or a comma-separated hex "
                                  "list, got '" +
                                  config.rand_override + "'");
            overrides.rand_values.push_back(value);
        }
        if (overrides.rand_values.empty())
            throw ConfigError("--rand-override hex list is empty");
    }
    return overrides;
}

TestcaseSet pipeline_gen(const PipelineConfig& config) {
    TestcaseSet set;
    if (!config.input_dir.empty())
        set = load_dir(config.input_dir);
    else if (!config.template_hex.empty())
        set = gen_template(config.template_hex, config.n, config.seed);
    else
        set = gen_random(config.n, config.len, config.seed);

    ensure_dir(testcases_dir(config));
    for (size_t i = 0; i < set.cases.size(); ++i) {
        std::vector<std::byte> bytes(set.cases[i].size());
        std::memcpy(bytes.data(), set.cases[i].data(), set.cases[i].size());
        save_file(testcases_dir(config) + "/" + case_filename(static_cast<uint32_t>(i), ".bin"),
                  bytes);
    }
    return set;
}

namespace {

Program resolve_program(const PipelineConfig& config) {
    if (config.program.empty()) throw ConfigError("no program selected (--program)");
    if (const CorpusProgram* entry = find_corpus_program(config.program))
        return entry->program;
    fs::path path(config.program);
    if (!fs::is_regular_file(path))
        throw ConfigError("unknown program '" + config.program +
                          "': not a corpus program name or a .mw file");
    std::ifstream in(path);
    std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return assemble(text, path.stem().string());
}

}  // namespace

std::vector<RawTraceRecord> pipeline_trace(const PipelineConfig& config,
                                           const TestcaseSet& testcases) {
    Program program = resolve_program(config);
    std::vector<RawTraceRecord> records =
        trace_program(program, testcases.cases, overrides_from_config(config), config.run_nonce);
    ensure_dir(config.out_dir);
    save_file(raw_trace_path(config), write_raw_trace(records));
    return records;
}

size_t pipeline_ingest(const PipelineConfig& config) {
    if (config.raw_input.empty()) throw ConfigError("no raw trace given (--raw)");
    std::vector<std::byte> bytes = load_file(config.raw_input);
    std::vector<RawTraceRecord> records = read_raw_trace(bytes);

    // Marker nesting and allocation matchability; relativization itself is
    // deferred to the preprocess stage.
    TraceSplit split = split_testcases(records);
    PreprocessWarnings scratch;
    AllocMap allocs;
    for (const RawTraceRecord& record : split.prefix)
        if (record.kind == RecordKind::AllocSize || record.kind == RecordKind::AllocAddr ||
            record.kind == RecordKind::Free)
            allocs.match(record, scratch);
    for (const TestcaseSegment& segment : split.segments) {
        AllocMap segment_allocs = allocs;
        for (const RawTraceRecord& record : segment.records)
            if (record.kind == RecordKind::AllocSize || record.kind == RecordKind::AllocAddr ||
                record.kind == RecordKind::Free)
                segment_allocs.match(record, scratch);
    }

    ensure_dir(config.out_dir);
    save_file(raw_trace_path(config), bytes);
    return records.size();
}

std::vector<RawTraceRecord> load_persisted_raw(const PipelineConfig& config) {
    return read_raw_trace(load_file(raw_trace_path(config)));
}

PreprocessResult pipeline_preprocess(const PipelineConfig& config,
                                     const std::vector<RawTraceRecord>& records) {
    PreprocessResult result = preprocess_trace(records);
    std::string dir = preprocessed_dir(config);
    ensure_dir(dir);
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".mwpp")
            fs::remove(entry.path());
    for (size_t i = 0; i < result.traces.size(); ++i)
        save_file(dir + "/" + case_filename(result.testcase_ids[i], ".mwpp"),
                  write_preprocessed_trace(result.traces[i]));
    return result;
}

PreprocessResult load_persisted_preprocessed(const PipelineConfig& config) {
    std::string dir = preprocessed_dir(config);
    if (!fs::is_directory(dir))
        throw std::runtime_error("no preprocessed traces under " + dir +
                                 " (run the preprocess stage first)");
    std::vector<std::pair<uint32_t, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".mwpp") continue;
        std::string stem = entry.path().stem().string();
        uint32_t id = 0;
        if (stem.starts_with("case_")) {
            auto digits = stem.substr(5);
            auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), id);
            if (ec != std::errc{}) continue;
        } else {
            continue;
        }
        files.emplace_back(id, entry.path());
    }
    std::sort(files.begin(), files.end());
    PreprocessResult result;
    for (const auto& [id, path] : files) {
        result.testcase_ids.push_back(id);
        result.traces.push_back(read_preprocessed_trace(load_file(path.string())));
    }
    // Unknown-region accesses are recountable from the entries themselves.
    for (const PreprocessedTrace& trace : result.traces)
        for (const PreprocessedEntry& e : trace.entries)
            if (e.kind == EntryKind::MemAccess && e.target.region == RegionKind::Unknown)
                result.warnings.unknown_region_accesses++;
    return result;
}

AnalysisBundle pipeline_analyze(const PipelineConfig& config,
                                const PreprocessResult& preprocessed) {
    if (preprocessed.traces.size() < 2)
        throw ConfigError("MI analyses need at least two test cases, got " +
                          std::to_string(preprocessed.traces.size()));
    GranularityConfig granularity = GranularityConfig::bytes(config.granularity);

    std::vector<std::vector<PreprocessedEntry>> reduced(preprocessed.traces.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(preprocessed.traces.size()); ++i)
        reduced[static_cast<size_t>(i)] =
            apply_granularity(preprocessed.traces[static_cast<size_t>(i)].entries, granularity);

    std::vector<TraceView> reduced_views;
    reduced_views.reserve(reduced.size());
    for (const auto& trace : reduced) reduced_views.emplace_back(trace);

    AnalysisBundle bundle;
    bundle.testcase_ids = preprocessed.testcase_ids;
    bundle.warnings = preprocessed.warnings;
    if (!preprocessed.traces.empty()) bundle.images = preprocessed.traces.front().images;
    bundle.whole_trace = whole_trace_mi(reduced_views, config.checkpoint_interval);
    bundle.instructions = instruction_mi(trace_views(preprocessed.traces), granularity);

    for (const auto& [case_a, case_b] : config.diff_pairs) {
        auto index_of = [&](uint32_t id) -> size_t {
            auto it = std::find(bundle.testcase_ids.begin(), bundle.testcase_ids.end(), id);
            if (it == bundle.testcase_ids.end())
                throw ConfigError("diff pair references unknown test case id " +
                                  std::to_string(id));
            return static_cast<size_t>(it - bundle.testcase_ids.begin());
        };
        DiffRecord record;
        record.case_a = case_a;
        record.case_b = case_b;
        record.divergence =
            compare_traces(reduced_views[index_of(case_a)], reduced_views[index_of(case_b)]);
        bundle.diffs.push_back(std::move(record));
    }
    return bundle;
}

void pipeline_report(const PipelineConfig& config, const AnalysisBundle& bundle) {
    SymbolMap symbols;
    std::vector<std::string> map_warnings;
    for (const auto& [image_id, path] : config.map_files)
        symbols.add_map_file(image_id, path, map_warnings);
    if (map_warnings.empty()) {
        emit_reports(bundle, config, symbols);
        return;
    }
    AnalysisBundle annotated = bundle;
    for (std::string& warning : map_warnings) annotated.warnings.note(std::move(warning));
    emit_reports(annotated, config, symbols);
}

void run_pipeline(const PipelineConfig& config) {
    validate_config(config);
    overrides_from_config(config);  // surface --rand-override parse errors up front
    if (config.raw_input.empty() && config.program.empty())
        throw ConfigError("select a trace source: --program for the built-in VM or --raw for an "
                          "external raw trace");

    std::vector<RawTraceRecord> records;
    if (!config.raw_input.empty()) {
        stage("ingest", [&] { pipeline_ingest(config); });
        records = stage("ingest", [&] { return load_persisted_raw(config); });
    } else {
        TestcaseSet testcases = stage("generate", [&] { return pipeline_gen(config); });
        records = stage("trace", [&] { return pipeline_trace(config, testcases); });
    }
    PreprocessResult preprocessed =
        stage("preprocess", [&] { return pipeline_preprocess(config, records); });
    records.clear();
    records.shrink_to_fit();
    AnalysisBundle bundle = stage("analyze", [&] { return pipeline_analyze(config, preprocessed); });
    stage("report", [&] { pipeline_report(config, bundle); });
}

}  // namespace leakscope

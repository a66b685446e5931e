#include <charconv>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "leakscope/report.hpp"

namespace {

using namespace leakscope;

uint64_t parse_u64(const std::string& text, const std::string& what) {
    std::string_view view(text);
    int base = 10;
    if (view.starts_with("0x") || view.starts_with("0X")) {
        base = 16;
        view.remove_prefix(2);
    }
    uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(view.data(), view.data() + view.size(), value, base);
    if (view.empty() || ec != std::errc{} || ptr != view.data() + view.size())
        throw ConfigError("bad " + what + ": '" + text + "'");
    return value;
}

void apply_key_value_flags(PipelineConfig& config, const std::vector<std::string>& features,
                           const std::vector<std::string>& maps,
                           const std::vector<std::string>& diffs) {
    for (const std::string& flag : features) {
        size_t eq = flag.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--feature expects k=v, got '" + flag + "'");
        config.features[static_cast<uint32_t>(parse_u64(flag.substr(0, eq), "feature key"))] =
            parse_u64(flag.substr(eq + 1), "feature value");
    }
    for (const std::string& flag : maps) {
        size_t eq = flag.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--map expects image_id=path, got '" + flag + "'");
        config.map_files[static_cast<uint16_t>(parse_u64(flag.substr(0, eq), "image id"))] =
            flag.substr(eq + 1);
    }
    for (const std::string& flag : diffs) {
        size_t comma = flag.find(',');
        if (comma == std::string::npos)
            throw ConfigError("--diff expects a,b test case ids, got '" + flag + "'");
        config.diff_pairs.emplace_back(
            static_cast<uint32_t>(parse_u64(flag.substr(0, comma), "test case id")),
            static_cast<uint32_t>(parse_u64(flag.substr(comma + 1), "test case id")));
    }
}

void print_mi(const char* label, const MIResult& result) {
    std::printf("%s %.6f / %.6f bits (classes: %zu, min-entropy: %.6f)\n", label, result.mi_bits,
                result.max_bits, result.class_count, result.min_entropy_bits);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"leakscope: trace-based leakage analysis for secret-dependent control flow "
                 "and memory access"};
    app.require_subcommand(1);

    PipelineConfig config;
    std::vector<std::string> feature_flags, map_flags, diff_flags;
    uint32_t compare_a = 0, compare_b = 0;

    auto add_out = [&](CLI::App* cmd) {
        cmd->add_option("--out", config.out_dir, "output directory (stage artifacts persist here)")
            ->capture_default_str();
    };
    auto add_gen_flags = [&](CLI::App* cmd) {
        cmd->add_option("--n", config.n, "number of test cases")->capture_default_str();
        cmd->add_option("--len", config.len, "test-case length in bytes")->capture_default_str();
        cmd->add_option("--seed", config.seed, "generator seed")->capture_default_str();
        cmd->add_option("--template", config.template_hex,
                        "hex template with ?? wildcards (template source)");
        cmd->add_option("--input-dir", config.input_dir,
                        "directory of pre-built test cases (directory source)");
    };
    auto add_trace_flags = [&](CLI::App* cmd) {
        cmd->add_option("--program", config.program, "corpus program name or .mw file");
        cmd->add_option("--rand-override", config.rand_override,
                        "\"derive\" or comma-separated hex values consumed by RAND")
            ->capture_default_str();
        cmd->add_option("--feature", feature_flags, "feature override k=v (repeatable)");
        cmd->add_option("--run-nonce", config.run_nonce,
                        "address-space randomization nonce for the VM")
            ->capture_default_str();
    };
    auto add_analysis_flags = [&](CLI::App* cmd) {
        cmd->add_option("--granularity", config.granularity,
                        "leakage granularity in bytes (power of two)")
            ->capture_default_str();
        cmd->add_option("--checkpoint", config.checkpoint_interval,
                        "whole-trace MI checkpoint interval (0 = auto)")
            ->capture_default_str();
    };
    auto add_report_flags = [&](CLI::App* cmd) {
        cmd->add_option("--threshold", config.threshold,
                        "text-report MI filter (report.json stays complete)")
            ->capture_default_str();
        cmd->add_option("--map", map_flags, "symbol MAP file, image_id=path (repeatable)");
        cmd->add_option("--diff", diff_flags, "emit diff for a pair of test cases, a,b "
                        "(repeatable)");
    };

    CLI::App* cmd_gen = app.add_subcommand("gen", "generate test cases");
    add_gen_flags(cmd_gen);
    add_out(cmd_gen);

    CLI::App* cmd_trace = app.add_subcommand("trace", "generate test cases and trace them in the VM");
    add_gen_flags(cmd_trace);
    add_trace_flags(cmd_trace);
    add_out(cmd_trace);

    CLI::App* cmd_ingest = app.add_subcommand("ingest", "validate and import an external raw trace");
    cmd_ingest->add_option("--raw", config.raw_input, "raw trace file (MWLK format)")->required();
    add_out(cmd_ingest);

    CLI::App* cmd_preprocess =
        app.add_subcommand("preprocess", "convert the raw trace to preprocessed traces");
    cmd_preprocess->add_option("--raw", config.raw_input,
                               "raw trace file (defaults to <out>/raw.trace)");
    add_out(cmd_preprocess);

    CLI::App* cmd_analyze = app.add_subcommand("analyze", "run analyses on preprocessed traces");
    cmd_analyze->require_subcommand(1);
    CLI::App* cmd_compare = cmd_analyze->add_subcommand("compare", "entry-wise trace comparison");
    cmd_compare->add_option("--a", compare_a, "first test case id")->required();
    cmd_compare->add_option("--b", compare_b, "second test case id")->required();
    add_analysis_flags(cmd_compare);
    add_out(cmd_compare);
    CLI::App* cmd_mi_trace = cmd_analyze->add_subcommand("mi-trace", "whole-trace mutual information");
    add_analysis_flags(cmd_mi_trace);
    add_out(cmd_mi_trace);
    CLI::App* cmd_mi_instr =
        cmd_analyze->add_subcommand("mi-instr", "single-instruction mutual information");
    add_analysis_flags(cmd_mi_instr);
    add_out(cmd_mi_instr);

    CLI::App* cmd_report =
        app.add_subcommand("report", "re-analyze persisted traces and write all reports");
    add_analysis_flags(cmd_report);
    add_report_flags(cmd_report);
    add_out(cmd_report);

    CLI::App* cmd_pipeline = app.add_subcommand("pipeline", "run every stage end to end");
    add_gen_flags(cmd_pipeline);
    add_trace_flags(cmd_pipeline);
    cmd_pipeline->add_option("--raw", config.raw_input,
                             "ingest an external raw trace instead of tracing");
    add_analysis_flags(cmd_pipeline);
    add_report_flags(cmd_pipeline);
    add_out(cmd_pipeline);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        apply_key_value_flags(config, feature_flags, map_flags, diff_flags);

        if (cmd_gen->parsed()) {
            TestcaseSet set = pipeline_gen(config);
            std::printf("generated %zu test case(s) under %s\n", set.cases.size(),
                        testcases_dir(config).c_str());
        } else if (cmd_trace->parsed()) {
            TestcaseSet set = pipeline_gen(config);
            std::vector<RawTraceRecord> records = pipeline_trace(config, set);
            std::printf("traced %zu test case(s): %zu records -> %s\n", set.cases.size(),
                        records.size(), raw_trace_path(config).c_str());
        } else if (cmd_ingest->parsed()) {
            size_t count = pipeline_ingest(config);
            std::printf("ingested %zu records -> %s\n", count, raw_trace_path(config).c_str());
        } else if (cmd_preprocess->parsed()) {
            std::vector<RawTraceRecord> records;
            if (!config.raw_input.empty())
                records = read_raw_trace(load_file(config.raw_input));
            else
                records = load_persisted_raw(config);
            PreprocessResult result = pipeline_preprocess(config, records);
            size_t entries = 0;
            for (const PreprocessedTrace& trace : result.traces) entries += trace.entries.size();
            std::printf("preprocessed %zu test case(s), %zu entries -> %s\n", result.traces.size(),
                        entries, preprocessed_dir(config).c_str());
            if (result.warnings.unknown_region_accesses)
                std::printf("warning: %zu unknown-region access(es)\n",
                            result.warnings.unknown_region_accesses);
        } else if (cmd_compare->parsed()) {
            PreprocessResult loaded = load_persisted_preprocessed(config);
            GranularityConfig granularity = GranularityConfig::bytes(config.granularity);
            auto index_of = [&](uint32_t id) -> size_t {
                for (size_t i = 0; i < loaded.testcase_ids.size(); ++i)
                    if (loaded.testcase_ids[i] == id) return i;
                throw ConfigError("unknown test case id " + std::to_string(id));
            };
            std::vector<PreprocessedEntry> a =
                apply_granularity(loaded.traces[index_of(compare_a)].entries, granularity);
            std::vector<PreprocessedEntry> b =
                apply_granularity(loaded.traces[index_of(compare_b)].entries, granularity);
            Divergence divergence = compare_traces(a, b);
            std::cout << format_divergence(divergence, compare_a, compare_b, SymbolMap{});
        } else if (cmd_mi_trace->parsed()) {
            PreprocessResult loaded = load_persisted_preprocessed(config);
            AnalysisBundle bundle = pipeline_analyze(config, loaded);
            print_mi("whole-trace MI:", bundle.whole_trace.final_result);
            std::printf("curve: %zu checkpoint(s), interval %zu\n",
                        bundle.whole_trace.curve.size(), bundle.whole_trace.checkpoint_interval);
        } else if (cmd_mi_instr->parsed()) {
            PreprocessResult loaded = load_persisted_preprocessed(config);
            GranularityConfig granularity = GranularityConfig::bytes(config.granularity);
            std::vector<InstructionMI> results =
                instruction_mi(trace_views(loaded.traces), granularity);
            std::printf("%zu instruction(s) analyzed\n", results.size());
            for (const InstructionMI& instr : results)
                std::printf("  %u:0x%llx  %-13s mi %.6f / %.6f  min-entropy %.6f\n",
                            instr.key.ref.image_id,
                            static_cast<unsigned long long>(instr.key.ref.offset),
                            to_string(instr.key.leak_class), instr.result.mi_bits,
                            instr.result.max_bits, instr.result.min_entropy_bits);
        } else if (cmd_report->parsed()) {
            PreprocessResult loaded = load_persisted_preprocessed(config);
            AnalysisBundle bundle = pipeline_analyze(config, loaded);
            pipeline_report(config, bundle);
            std::printf("reports written under %s\n", config.out_dir.c_str());
        } else if (cmd_pipeline->parsed()) {
            run_pipeline(config);
            std::printf("pipeline complete; reports under %s\n", config.out_dir.c_str());
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

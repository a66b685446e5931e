#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "leakscope/analysis.hpp"
#include "leakscope/minivm.hpp"
#include "leakscope/preprocess.hpp"
#include "leakscope/testcase.hpp"
#include "leakscope/trace_format.hpp"

namespace leakscope {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ReportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage failure: carries the stage name so the CLI can report
// "stage <name> failed: <cause>" and exit with the stage-failure code.
struct StageError : std::runtime_error {
    StageError(std::string stage, const std::string& cause)
        : std::runtime_error("stage " + stage + " failed: " + cause), stage(std::move(stage)) {}
    std::string stage;
};

// ---------------------------------------------------------------------------
// Symbolization

// Per image, a strictly increasing list of (offset, name). Lookup resolves an
// instruction offset to the greatest symbol offset at or below it.
class SymbolMap {
public:
    // Adds one MAP file ("HEXOFFSET NAME" per line) for an image. Malformed
    // lines are skipped with a warning; duplicate offsets violate the
    // strictly-increasing invariant and throw ReportError.
    void add_map_file(uint16_t image_id, const std::string& path,
                      std::vector<std::string>& warnings);

    void add_symbol(uint16_t image_id, uint64_t offset, std::string name);

    // "name" / "name+0x12" for symbolized refs, plain "0x80" otherwise.
    std::string symbolize(AbsCodeRef ref) const;

    bool empty() const { return images_.empty(); }

private:
    void finalize(uint16_t image_id);

    std::map<uint16_t, std::vector<std::pair<uint64_t, std::string>>> images_;
};

// ---------------------------------------------------------------------------
// Pipeline configuration (CLI flags map onto these fields 1:1)

struct PipelineConfig {
    std::string program;              // corpus program name or path to a .mw file
    std::string raw_input;            // external raw trace to ingest instead of tracing
    size_t n = 128;
    size_t len = 16;
    uint64_t seed = 0;
    std::string template_hex;         // template source (hex with "??" wildcards)
    std::string input_dir;            // directory source
    uint64_t granularity = 1;
    size_t checkpoint_interval = 0;   // 0 = auto
    std::string rand_override = "derive";  // "derive" or comma-separated hex list
    std::map<uint32_t, uint64_t> features;
    std::map<uint16_t, std::string> map_files;
    double threshold = 0.0;           // text-report filter only
    std::string out_dir = "out";
    uint64_t run_nonce = 0;
    std::vector<std::pair<uint32_t, uint32_t>> diff_pairs;
};

// Paths of persisted stage outputs under out_dir.
std::string testcases_dir(const PipelineConfig& config);
std::string raw_trace_path(const PipelineConfig& config);
std::string preprocessed_dir(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Analysis results bundled for reporting

struct DiffRecord {
    uint32_t case_a = 0;
    uint32_t case_b = 0;
    Divergence divergence;
};

struct AnalysisBundle {
    std::vector<uint32_t> testcase_ids;
    std::vector<PreprocessedImage> images;
    WholeTraceMI whole_trace;
    std::vector<InstructionMI> instructions;
    std::vector<DiffRecord> diffs;
    PreprocessWarnings warnings;
};

// ---------------------------------------------------------------------------
// Stages. Each persists its outputs under config.out_dir so later stages can
// re-run (e.g. with a different granularity) without re-tracing.

Overrides overrides_from_config(const PipelineConfig& config);

TestcaseSet pipeline_gen(const PipelineConfig& config);
std::vector<RawTraceRecord> pipeline_trace(const PipelineConfig& config,
                                           const TestcaseSet& testcases);
PreprocessResult pipeline_preprocess(const PipelineConfig& config,
                                     const std::vector<RawTraceRecord>& records);
AnalysisBundle pipeline_analyze(const PipelineConfig& config, const PreprocessResult& preprocessed);
void pipeline_report(const PipelineConfig& config, const AnalysisBundle& bundle);

// Reload persisted artifacts for stage re-runs.
std::vector<RawTraceRecord> load_persisted_raw(const PipelineConfig& config);
PreprocessResult load_persisted_preprocessed(const PipelineConfig& config);

// Validates an external raw trace (structure plus marker/allocation
// invariants) and persists it as the pipeline's raw stage output. Returns the
// record count.
size_t pipeline_ingest(const PipelineConfig& config);

// gen -> trace/ingest -> preprocess -> analyze -> report. Throws ConfigError
// for invalid configurations and StageError for stage failures; partial
// outputs are retained.
void run_pipeline(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Report emission: report.json, report.txt, annotations.csv and one
// diff_<a>_<b>.txt per requested pair. Output is byte-identical for identical
// inputs and configuration.

void emit_reports(const AnalysisBundle& bundle, const PipelineConfig& config,
                  const SymbolMap& symbols);

std::string format_divergence(const Divergence& divergence, uint32_t case_a, uint32_t case_b,
                              const SymbolMap& symbols);

}  // namespace leakscope

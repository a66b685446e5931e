// Benchmark for the parallel analysis kernels against their serial reference
// implementations, on bench_loop traces (about 60k entries per test case).
//
//   bench_analysis [cases] [granularity]

#include <cstdio>
#include <cstdlib>

#include <omp.h>

#include "leakscope/analysis.hpp"
#include "leakscope/minivm.hpp"
#include "leakscope/preprocess.hpp"
#include "leakscope/testcase.hpp"

using namespace leakscope;

namespace {

bool same_instruction_results(const std::vector<InstructionMI>& a,
                              const std::vector<InstructionMI>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!(a[i].key == b[i].key) || !(a[i].result == b[i].result)) return false;
    return true;
}

bool same_whole_trace_results(const WholeTraceMI& a, const WholeTraceMI& b) {
    if (!(a.final_result == b.final_result) || a.curve.size() != b.curve.size()) return false;
    for (size_t i = 0; i < a.curve.size(); ++i)
        if (a.curve[i].prefix_entries != b.curve[i].prefix_entries ||
            !(a.curve[i].result == b.curve[i].result))
            return false;
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    size_t cases = argc > 1 ? static_cast<size_t>(std::atoll(argv[1])) : 32;
    uint64_t granularity = argc > 2 ? static_cast<uint64_t>(std::atoll(argv[2])) : 64;

    const CorpusProgram* bench = find_corpus_program("bench_loop");
    if (!bench) {
        std::fprintf(stderr, "bench_loop missing from corpus\n");
        return 1;
    }

    std::printf("threads: %d\n", omp_get_max_threads());
    TestcaseSet inputs = gen_random(cases, bench->info.input_len, 1);

    double t0 = omp_get_wtime();
    std::vector<RawTraceRecord> records = trace_program(bench->program, inputs.cases, {}, 0);
    double t1 = omp_get_wtime();
    std::printf("trace:          %zu cases, %zu records, %.2f s\n", cases, records.size(),
                t1 - t0);

    t0 = omp_get_wtime();
    PreprocessResult preprocessed = preprocess_trace(records);
    t1 = omp_get_wtime();
    size_t entries = 0;
    for (const PreprocessedTrace& trace : preprocessed.traces) entries += trace.entries.size();
    std::printf("preprocess:     %zu entries, %.2f s (%.1f M entries/s)\n", entries, t1 - t0,
                entries / (t1 - t0) / 1e6);
    records.clear();
    records.shrink_to_fit();

    std::vector<TraceView> views = trace_views(preprocessed.traces);
    GranularityConfig cfg = GranularityConfig::bytes(granularity);

    t0 = omp_get_wtime();
    std::vector<InstructionMI> instr_serial = instruction_mi_serial(views, cfg);
    t1 = omp_get_wtime();
    double instr_serial_s = t1 - t0;
    t0 = omp_get_wtime();
    std::vector<InstructionMI> instr_parallel = instruction_mi(views, cfg);
    t1 = omp_get_wtime();
    double instr_parallel_s = t1 - t0;
    std::printf("instruction MI: serial %.2f s, parallel %.2f s, speedup %.2fx, results %s\n",
                instr_serial_s, instr_parallel_s, instr_serial_s / instr_parallel_s,
                same_instruction_results(instr_serial, instr_parallel) ? "identical"
                                                                       : "DIFFER (bug!)");

    size_t checkpoint = 64;  // keep the curve small; hashing still scans every entry
    t0 = omp_get_wtime();
    WholeTraceMI whole_serial = whole_trace_mi_serial(views, checkpoint);
    t1 = omp_get_wtime();
    double whole_serial_s = t1 - t0;
    t0 = omp_get_wtime();
    WholeTraceMI whole_parallel = whole_trace_mi(views, checkpoint);
    t1 = omp_get_wtime();
    double whole_parallel_s = t1 - t0;
    std::printf("whole-trace MI: serial %.2f s, parallel %.2f s, speedup %.2fx, results %s\n",
                whole_serial_s, whole_parallel_s, whole_serial_s / whole_parallel_s,
                same_whole_trace_results(whole_serial, whole_parallel) ? "identical"
                                                                       : "DIFFER (bug!)");
    std::printf("final whole-trace MI: %.4f / %.4f bits\n", whole_parallel.final_result.mi_bits,
                whole_parallel.final_result.max_bits);
    return 0;
}

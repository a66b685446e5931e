#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "leakscope/analysis.hpp"
#include "leakscope/minivm.hpp"
#include "leakscope/preprocess.hpp"
#include "leakscope/testcase.hpp"

using namespace leakscope;

namespace {

std::vector<uint8_t> le_bytes(std::initializer_list<uint64_t> words) {
    std::vector<uint8_t> bytes;
    for (uint64_t w : words)
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(w >> (8 * i)));
    return bytes;
}

std::vector<PreprocessedTrace> corpus_traces(const char* name,
                                             const std::vector<std::vector<uint8_t>>& cases,
                                             const Overrides& overrides = {}) {
    const CorpusProgram* entry = find_corpus_program(name);
    REQUIRE(entry != nullptr);
    return preprocess_trace(trace_program(entry->program, cases, overrides, 0)).traces;
}

PreprocessedEntry mem_entry(uint64_t instr_off, uint64_t data_off) {
    return PreprocessedEntry::mem_access(MemDir::Read, {0, instr_off},
                                         {RegionKind::Image, 0, data_off});
}

// Brute-force MI straight from the joint-distribution definition: group raw
// traces by equality, then sum p(x,y) * log2(p(x,y) / (p(x) p(y))) over the
// observed pairs. Independent of the hash-and-count production path.
double joint_definition_mi(const std::vector<std::vector<PreprocessedEntry>>& traces) {
    const double n = static_cast<double>(traces.size());
    std::map<std::vector<std::byte>, size_t> class_of;
    std::vector<size_t> class_sizes;
    std::vector<size_t> class_of_case(traces.size());
    for (size_t x = 0; x < traces.size(); ++x) {
        PreprocessedTrace wrapped;
        wrapped.entries = traces[x];
        auto [it, inserted] = class_of.emplace(write_preprocessed_trace(wrapped), class_sizes.size());
        if (inserted) class_sizes.push_back(0);
        class_of_case[x] = it->second;
        class_sizes[it->second]++;
    }
    double mi = 0.0;
    for (size_t x = 0; x < traces.size(); ++x) {
        double p_xy = 1.0 / n;
        double p_x = 1.0 / n;
        double p_y = static_cast<double>(class_sizes[class_of_case[x]]) / n;
        mi += p_xy * std::log2(p_xy / (p_x * p_y));
    }
    return mi;
}

}  // namespace

TEST_CASE("apply_granularity reduces data offsets only") {
    std::vector<PreprocessedEntry> trace = {
        mem_entry(4, 4660),
        mem_entry(8, 0x40),
        mem_entry(8, 0x7F),
        PreprocessedEntry::make_branch(BranchKind::CondTaken, {0, 4660}, {0, 8}),
    };
    std::vector<PreprocessedEntry> reduced =
        apply_granularity(trace, GranularityConfig::bytes(64));
    CHECK(reduced[0].target.offset == 72);  // 4660 >> 6
    CHECK(reduced[0].code.offset == 4);
    CHECK(reduced[1].target.offset == 1);
    CHECK(reduced[2].target.offset == 1);   // same cache line
    CHECK(reduced[3] == trace[3]);          // branch untouched

    CHECK(apply_granularity(trace, GranularityConfig::bytes(1)) == trace);
}

TEST_CASE("mi_from_counts matches hand-computed scores") {
    MIResult singletons = mi_from_counts(std::vector<size_t>(128, 1));
    CHECK(singletons.mi_bits == 7.0);
    CHECK(singletons.max_bits == 7.0);
    CHECK(singletons.class_count == 128);
    CHECK(singletons.min_entropy_bits == 7.0);

    MIResult constant = mi_from_counts(std::vector<size_t>{77});
    CHECK(constant.mi_bits == 0.0);
    CHECK(constant.class_count == 1);
    CHECK(constant.min_entropy_bits == 0.0);

    // 0.5*1 + 0.25*2 + 0.25*2 over |X| = 4.
    MIResult mixed = mi_from_counts(std::vector<size_t>{2, 1, 1});
    CHECK(mixed.mi_bits == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(mixed.class_sizes == std::vector<size_t>{2, 1, 1});

    CHECK_THROWS_AS(mi_from_counts(std::vector<size_t>{}), AnalysisError);
    CHECK_THROWS_AS(mi_from_counts(std::vector<size_t>{1, 0}), AnalysisError);
}

TEST_CASE("mi_from_counts invariants hold on random partitions") {
    std::mt19937_64 rng(31337);
    for (int i = 0; i < 100; ++i) {
        size_t classes = 1 + rng() % 20;
        std::vector<size_t> sizes;
        for (size_t c = 0; c < classes; ++c) sizes.push_back(1 + rng() % 50);
        MIResult result = mi_from_counts(sizes);
        CHECK(result.mi_bits >= 0.0);
        CHECK(result.mi_bits <= result.max_bits + 1e-12);
        CHECK((result.class_count == 1) == (result.mi_bits == 0.0));
        CHECK(result.min_entropy_bits ==
              doctest::Approx(std::log2(double(result.class_count))).epsilon(1e-12));

        std::shuffle(sizes.begin(), sizes.end(), rng);  // permutation invariance
        CHECK(mi_from_counts(sizes) == result);
    }
}

TEST_CASE("compare_traces on identical and single-entry differences") {
    std::vector<PreprocessedEntry> a;
    for (uint64_t i = 0; i < 10; ++i) a.push_back(mem_entry(4 * i, 0x100 + i));
    CHECK(compare_traces(a, a).identical());

    std::vector<PreprocessedEntry> b = a;
    b[5] = mem_entry(20, 0x999);
    Divergence d = compare_traces(a, b);
    REQUIRE(d.first_diff_index.has_value());
    CHECK(*d.first_diff_index == 5);
    REQUIRE(d.hunks.size() == 1);
    CHECK(d.hunks[0].a_begin == 5);
    CHECK(d.hunks[0].a_end == 6);
    CHECK(d.hunks[0].b_begin == 5);
    CHECK(d.hunks[0].b_end == 6);
}

TEST_CASE("compare_traces resynchronizes across insertions") {
    std::vector<PreprocessedEntry> a;
    for (uint64_t i = 0; i < 12; ++i) a.push_back(mem_entry(4 * i, 0x100 + i));
    std::vector<PreprocessedEntry> b = a;
    b.insert(b.begin() + 3, {mem_entry(999, 1), mem_entry(999, 2)});
    Divergence d = compare_traces(a, b);
    REQUIRE(d.first_diff_index.has_value());
    CHECK(*d.first_diff_index == 3);
    REQUIRE(d.hunks.size() == 1);
    CHECK(d.hunks[0].a_begin == d.hunks[0].a_end);  // pure insertion on the b side
    CHECK(d.hunks[0].b_end - d.hunks[0].b_begin == 2);

    // Tail-length differences form a final hunk.
    std::vector<PreprocessedEntry> c = a;
    c.push_back(mem_entry(999, 3));
    Divergence tail = compare_traces(a, c);
    REQUIRE(tail.first_diff_index.has_value());
    CHECK(*tail.first_diff_index == a.size());
}

TEST_CASE("square_multiply diverges first at the low-bit guard") {
    // Exponents 0b10 and 0b11 over two bits differ exactly in the last
    // guard decision.
    std::vector<std::vector<uint8_t>> cases = {le_bytes({0b10, 2}), le_bytes({0b11, 2})};
    std::vector<PreprocessedTrace> traces = corpus_traces("square_multiply", cases);
    REQUIRE(traces.size() == 2);

    // Independent positional scan as the oracle.
    const auto& a = traces[0].entries;
    const auto& b = traces[1].entries;
    size_t oracle = 0;
    while (oracle < std::min(a.size(), b.size()) && a[oracle] == b[oracle]) ++oracle;

    Divergence d = compare_traces(a, b);
    REQUIRE(d.first_diff_index.has_value());
    CHECK(*d.first_diff_index == oracle);
    REQUIRE(oracle < a.size());
    CHECK(a[oracle].kind == EntryKind::Branch);
    CHECK(a[oracle].code == AbsCodeRef{0, 13 * 4});  // the documented guard
}

TEST_CASE("whole-trace MI is zero for ct_select and full for square_multiply") {
    TestcaseSet inputs = gen_random(16, 16, 5);
    std::vector<PreprocessedTrace> ct = corpus_traces("ct_select", inputs.cases);
    WholeTraceMI ct_mi = whole_trace_mi(trace_views(ct), 1);
    CHECK(ct_mi.final_result.mi_bits == 0.0);
    CHECK(ct_mi.final_result.class_count == 1);
    for (const MICurvePoint& point : ct_mi.curve) CHECK(point.result.mi_bits == 0.0);

    std::vector<std::vector<uint8_t>> exps;
    for (uint64_t e = 0; e < 8; ++e) exps.push_back(le_bytes({e, 3}));
    std::vector<PreprocessedTrace> sm = corpus_traces("square_multiply", exps);
    WholeTraceMI sm_mi = whole_trace_mi(trace_views(sm), 1);
    CHECK(sm_mi.final_result.mi_bits == 3.0);
    CHECK(sm_mi.final_result.max_bits == 3.0);
}

TEST_CASE("whole-trace MI requires two cases and freezes exhausted traces") {
    std::vector<PreprocessedEntry> only = {mem_entry(0, 1)};
    std::vector<TraceView> one = {only};
    CHECK_THROWS_AS(whole_trace_mi(one, 1), AnalysisError);

    // Case a is a strict prefix of case b: they differ from entry 2 onward,
    // and the frozen final hash keeps |X| observations per checkpoint.
    std::vector<PreprocessedEntry> a = {mem_entry(0, 1), mem_entry(4, 2)};
    std::vector<PreprocessedEntry> b = {mem_entry(0, 1), mem_entry(4, 2), mem_entry(8, 3),
                                        mem_entry(12, 4)};
    std::vector<TraceView> views = {a, b};
    WholeTraceMI result = whole_trace_mi(views, 1);
    REQUIRE(result.curve.size() == 4);
    CHECK(result.curve[0].result.mi_bits == 0.0);
    CHECK(result.curve[1].result.mi_bits == 0.0);
    CHECK(result.curve[2].result.mi_bits == 1.0);
    CHECK(result.curve[3].result.mi_bits == 1.0);
    CHECK(result.final_result.mi_bits == 1.0);
    for (const MICurvePoint& point : result.curve)
        CHECK(point.result.class_sizes.size() <= 2);
}

TEST_CASE("whole-trace MI final value matches the joint-definition oracle") {
    std::mt19937_64 rng(2024);
    for (int round = 0; round < 10; ++round) {
        size_t cases = 2 + rng() % 15;
        size_t pool = 1 + rng() % 4;
        std::vector<std::vector<PreprocessedEntry>> pool_traces(pool);
        for (auto& t : pool_traces) {
            size_t len = 1 + rng() % 12;
            for (size_t i = 0; i < len; ++i) t.push_back(mem_entry(4 * (rng() % 16), rng() % 64));
        }
        std::vector<std::vector<PreprocessedEntry>> traces;
        for (size_t c = 0; c < cases; ++c) traces.push_back(pool_traces[rng() % pool]);

        std::vector<TraceView> views(traces.begin(), traces.end());
        WholeTraceMI result = whole_trace_mi(views, 1);
        CHECK(result.final_result.mi_bits ==
              doctest::Approx(joint_definition_mi(traces)).epsilon(1e-9));
    }
}

TEST_CASE("serial and parallel analyses agree") {
    std::vector<std::vector<uint8_t>> cases;
    for (uint64_t e = 0; e < 16; ++e) cases.push_back(le_bytes({e}));
    std::vector<PreprocessedTrace> traces = corpus_traces("montgomery_bitmask", cases);
    std::vector<TraceView> views = trace_views(traces);

    WholeTraceMI parallel = whole_trace_mi(views, 2);
    WholeTraceMI serial = whole_trace_mi_serial(views, 2);
    CHECK(parallel.final_result == serial.final_result);
    REQUIRE(parallel.curve.size() == serial.curve.size());
    for (size_t i = 0; i < parallel.curve.size(); ++i) {
        CHECK(parallel.curve[i].prefix_entries == serial.curve[i].prefix_entries);
        CHECK(parallel.curve[i].result == serial.curve[i].result);
    }

    GranularityConfig g1 = GranularityConfig::bytes(1);
    std::vector<InstructionMI> instr_parallel = instruction_mi(views, g1);
    std::vector<InstructionMI> instr_serial = instruction_mi_serial(views, g1);
    REQUIRE(instr_parallel.size() == instr_serial.size());
    for (size_t i = 0; i < instr_parallel.size(); ++i) {
        CHECK(instr_parallel[i].key == instr_serial[i].key);
        CHECK(instr_parallel[i].result == instr_serial[i].result);
    }
}

TEST_CASE("instruction MI localizes the ttable lookup") {
    TestcaseSet inputs = gen_random(128, 1, 77);
    std::vector<PreprocessedTrace> traces = corpus_traces("ttable_lookup", inputs.cases);
    std::vector<TraceView> views = trace_views(traces);

    InstructionKey lookup{{0, 7 * 4}, LeakClass::Memory};
    auto find_key = [&](const std::vector<InstructionMI>& results,
                        const InstructionKey& key) -> const MIResult* {
        for (const InstructionMI& r : results)
            if (r.key == key) return &r.result;
        return nullptr;
    };

    std::vector<InstructionMI> fine = instruction_mi(views, GranularityConfig::bytes(1));
    const MIResult* fine_lookup = find_key(fine, lookup);
    REQUIRE(fine_lookup != nullptr);
    CHECK(fine_lookup->mi_bits == 7.0);  // 128 distinct bytes, 128 singleton classes

    // Only the lookup leaks; everything else is constant.
    for (const InstructionMI& r : fine)
        if (!(r.key == lookup)) CHECK(r.result.mi_bits == 0.0);

    std::vector<InstructionMI> coarse = instruction_mi(views, GranularityConfig::bytes(64));
    const MIResult* coarse_lookup = find_key(coarse, lookup);
    REQUIRE(coarse_lookup != nullptr);
    CHECK(coarse_lookup->mi_bits <= fine_lookup->mi_bits);
    CHECK(coarse_lookup->class_count <= 16);
}

TEST_CASE("instruction MI covers branches and never-executed cases") {
    std::vector<std::vector<uint8_t>> exps;
    for (uint64_t e = 0; e < 8; ++e) exps.push_back(le_bytes({e, 3}));
    std::vector<PreprocessedTrace> traces = corpus_traces("square_multiply", exps);
    std::vector<InstructionMI> results =
        instruction_mi(trace_views(traces), GranularityConfig::bytes(1));

    bool found_guard = false;
    for (const InstructionMI& r : results) {
        if (r.key == InstructionKey{{0, 13 * 4}, LeakClass::ControlFlow}) {
            found_guard = true;
            CHECK(r.result.mi_bits == 3.0);
        }
    }
    CHECK(found_guard);

    // The multiply body (JMP at index 16) never runs for exponent 0; its
    // class set still spans all 8 cases.
    bool found_body = false;
    for (const InstructionMI& r : results)
        if (r.key == InstructionKey{{0, 16 * 4}, LeakClass::ControlFlow}) {
            found_body = true;
            size_t total = 0;
            for (size_t c : r.result.class_sizes) total += c;
            CHECK(total == 8);
            CHECK(r.result.mi_bits > 0.0);
        }
    CHECK(found_body);
}

TEST_CASE("granularity monotonicity holds per instruction") {
    TestcaseSet inputs = gen_random(64, 1, 3);
    std::vector<PreprocessedTrace> traces = corpus_traces("ttable_lookup", inputs.cases);
    std::vector<TraceView> views = trace_views(traces);
    std::vector<InstructionMI> g1 = instruction_mi(views, GranularityConfig::bytes(1));
    std::vector<InstructionMI> g4 = instruction_mi(views, GranularityConfig::bytes(4));
    std::vector<InstructionMI> g64 = instruction_mi(views, GranularityConfig::bytes(64));
    REQUIRE(g1.size() == g4.size());
    REQUIRE(g1.size() == g64.size());
    for (size_t i = 0; i < g1.size(); ++i) {
        CHECK(g64[i].result.mi_bits <= g4[i].result.mi_bits);
        CHECK(g4[i].result.mi_bits <= g1[i].result.mi_bits);
    }
}

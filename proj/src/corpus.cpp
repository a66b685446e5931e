#include "leakscope/minivm.hpp"

namespace leakscope {

namespace {

// The same texts ship as corpus/*.mw; a unit test keeps both in sync.

constexpr const char kSquareMultiply[] = R"(; Left-to-right binary exponentiation with a conditional multiply.
; Input: bytes 0..7 exponent (little endian), bytes 8..15 bit width (capped at 63).
        IN r0, 0            ; exponent
        IN r1, 1            ; remaining bits
        LOADI r6, 63
        AND r1, r1, r6      ; cap the width so arbitrary inputs terminate
        LOADI r2, 1         ; accumulator
        LOADI r3, 3         ; base
        LOADI r4, 0
        LOADI r5, 1
loop:   BEQ r1, r4, done    ; all bits consumed
        SUB r1, r1, r5
        MUL r2, r2, r2      ; square
        SHR r6, r0, r1
        AND r6, r6, r5      ; current bit
        BEQ r6, r5, mult    ; multiply guard: taken when the bit is one
        JMP loop
mult:   MUL r2, r2, r3      ; multiply
        JMP loop
done:   HALT
)";

constexpr const char kMontgomeryBitmask[] = R"(; Bit-serial exponentiation with a masked operand select. The index advances
; by 1 - m, so each one-bit costs an extra pass through the loop body.
; Input: bytes 0..7 exponent (little endian).
        IN r0, 0            ; exponent
        LOADI r1, 0
        LOADI r2, 1
        LOADI r11, 0xffffffffffffffff
        MOV r3, r0
        LOADI r4, 0         ; bit length
blen:   BEQ r3, r1, binit
        SHR r3, r3, r2
        ADD r4, r4, r2
        JMP blen
binit:  LOADI r5, 7         ; accumulator
        LOADI r6, 5         ; multiplier operand
        LOADI r7, 0         ; m
        LOADI r8, 0         ; i
main:   BEQ r8, r4, done    ; loop guard
        SUB r9, r1, r7      ; mask = 0 - m
        XOR r10, r9, r11    ; ~mask
        AND r12, r5, r10
        AND r13, r6, r9
        OR r12, r12, r13    ; masked operand select
        MUL r5, r5, r12
        SHR r13, r0, r8
        AND r13, r13, r2    ; current bit
        XOR r14, r7, r2
        AND r7, r14, r13    ; m = ~m & bit
        ADD r8, r8, r2
        SUB r8, r8, r7      ; i = i + 1 - m
        JMP main
done:   HALT
)";

constexpr const char kScalarWindow[] = R"(; Fixed-window scalar walk (window size 5 over a 20-bit field) that skips
; leading all-zero windows before entering the main loop.
; Input: bytes 0..7 scalar (little endian, low 20 bits used).
        IN r0, 0
        LOADI r1, 0xfffff
        AND r0, r0, r1      ; confine to the 20-bit field
        LOADI r2, 0
        LOADI r3, 1
        LOADI r4, 5         ; window size
        LOADI r5, 4         ; remaining windows
        LOADI r6, 31        ; window mask
        LOADI r9, 1         ; accumulator
        LOADI r10, 2
skip:   BEQ r5, r2, done    ; scalar was all zero
        SUB r7, r5, r3
        MUL r8, r7, r4
        SHR r8, r0, r8
        AND r8, r8, r6      ; top window value
        BNE r8, r2, main    ; stop skipping at the first non-zero window
        SUB r5, r5, r3
        JMP skip
main:   BEQ r5, r2, done    ; window loop guard
        SUB r5, r5, r3
        MUL r7, r5, r4
        SHR r7, r0, r7
        AND r7, r7, r6      ; window value
        SHL r9, r9, r4      ; five doublings
        MUL r7, r7, r10
        ADD r7, r7, r3
        MUL r9, r9, r7      ; branch-free window multiply
        JMP main
done:   HALT
)";

constexpr const char kMaskedModinv[] = R"(; Masked inversion stand-in: a bit-serial loop walks the product of the
; secret and a RAND-supplied mask, so the branch structure tracks the
; masked value rather than the secret itself.
; Input: bytes 0..7 secret operand (little endian).
        IN r0, 0
        RAND r1             ; per-case mask
        MUL r2, r0, r1      ; masked operand
        LOADI r3, 0
        LOADI r4, 1
        LOADI r5, 0         ; accumulator
loop:   BEQ r2, r3, done    ; loop guard
        AND r6, r2, r4
        BEQ r6, r4, odd     ; low bit set?
        JMP next
odd:    ADD r5, r5, r2
next:   SHR r2, r2, r4
        JMP loop
done:   HALT
)";

constexpr const char kTtableLookup[] = R"(; Single lookup into a 256-entry, 4-byte-stride table in the static data
; section, indexed by the low input byte.
; Input: byte 0 selects the table entry.
        IN r0, 0
        LOADI r1, 0xff
        AND r0, r0, r1
        LOADI r2, 4
        MUL r0, r0, r2
        LOADI r3, 0x410000  ; table base (static data section of image 0)
        ADD r0, r0, r3
        LOAD r4, [r0]       ; the leaking lookup
        HALT
)";

constexpr const char kCtSelect[] = R"(; Branch-free masked select with constant-address memory traffic; every
; input takes the identical path.
; Input: bytes 0..7 value a, bytes 8..15 value b; bit 0 of a selects.
        IN r0, 0
        IN r1, 1
        LOADI r2, 0
        LOADI r3, 1
        AND r4, r0, r3      ; selector bit
        SUB r5, r2, r4      ; mask = 0 - selector
        LOADI r6, 0xffffffffffffffff
        XOR r7, r5, r6      ; ~mask
        AND r8, r0, r5
        AND r9, r1, r7
        OR r10, r8, r9      ; selected value
        CALL store
        HALT
store:  LOADI r11, 0x410000 ; fixed scratch slot in the static data section
        STORE [r11], r10
        LOAD r12, [r11]
        PUSH r12
        POP r13
        RET
)";

constexpr const char kBenchLoop[] = R"(; High-volume lookup loop used for throughput benchmarking: each iteration
; emits a guard branch, one table read and a back jump.
; Input: byte 0 seeds the rolling index.
        IN r0, 0
        LOADI r1, 0xff
        AND r0, r0, r1
        LOADI r2, 20000     ; iterations
        LOADI r3, 0x410000  ; table base
        LOADI r4, 0
        LOADI r5, 1
        LOADI r6, 4
        LOADI r7, 33
        LOADI r8, 7
loop:   BEQ r2, r4, done
        MUL r9, r0, r6
        ADD r9, r9, r3
        LOAD r10, [r9]      ; input-dependent lookup
        MUL r0, r0, r7
        ADD r0, r0, r8
        AND r0, r0, r1
        SUB r2, r2, r5
        JMP loop
done:   HALT
)";

CorpusProgram make(const char* text, CorpusInfo info) {
    CorpusProgram entry;
    entry.program = assemble(text, info.name);
    entry.text = text;
    entry.info = std::move(info);
    return entry;
}

std::vector<CorpusProgram> build_corpus() {
    std::vector<CorpusProgram> programs;
    programs.push_back(make(
        kSquareMultiply,
        {"square_multiply", "square_multiply.mw", 16, "control_flow", {13},
         "The multiply guard at index 13 is taken exactly for the one-bits of the exponent, "
         "scanned from the most significant of the requested bits downward."}));
    programs.push_back(make(
        kMontgomeryBitmask,
        {"montgomery_bitmask", "montgomery_bitmask.mw", 8, "control_flow", {6, 14},
         "The bit-length scan guard (6) runs bitlength times; the masked main loop guard (14) "
         "runs bitlength + hamming-weight times, so the trace reveals both quantities."}));
    programs.push_back(make(
        kScalarWindow,
        {"scalar_window", "scalar_window.mw", 8, "control_flow", {10, 15, 18},
         "Leading all-zero 5-bit windows are skipped (guards 10/15), so the window loop guard "
         "(18) runs once per remaining window; the trace reveals the leading-zero-window "
         "count."}));
    programs.push_back(make(
        kMaskedModinv,
        {"masked_modinv", "masked_modinv.mw", 8, "control_flow", {6, 8},
         "The bit-serial loop (guards 6 and 8) walks secret*mask bit by bit; with a random "
         "per-case mask the trace tracks the masked product, with a fixed mask it tracks the "
         "secret directly."}));
    programs.push_back(make(
        kTtableLookup,
        {"ttable_lookup", "ttable_lookup.mw", 1, "memory", {7},
         "The load at index 7 touches table entry 4*b for input byte b: 256 entries spanning "
         "16 cache lines at 64-byte granularity."}));
    programs.push_back(make(
        kCtSelect,
        {"ct_select", "ct_select.mw", 16, "none", {},
         "Constant trace by construction: branch-free select plus fixed-address store, load, "
         "push, pop and a constant call/return pair."}));
    programs.push_back(make(
        kBenchLoop,
        {"bench_loop", "bench_loop.mw", 1, "memory", {13},
         "20000-iteration lookup loop over the table, rolling the index byte through an "
         "affine permutation; roughly 60k trace entries per test case."}));
    return programs;
}

}  // namespace

const std::vector<CorpusProgram>& corpus() {
    static const std::vector<CorpusProgram> programs = build_corpus();
    return programs;
}

const CorpusProgram* find_corpus_program(std::string_view name) {
    for (const CorpusProgram& entry : corpus())
        if (entry.info.name == name) return &entry;
    return nullptr;
}

}  // namespace leakscope

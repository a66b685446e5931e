#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "leakscope/trace_format.hpp"

namespace leakscope {

// ---------------------------------------------------------------------------
// Toy register ISA
//
// Sixteen 64-bit registers r0..r15, a dedicated stack pointer and a flat
// 64-bit address space with three regions: image 0 (code + static data),
// a one-page-per-window sparse stack and a bump-allocated heap. One
// instruction occupies four bytes of code, so instruction i sits at image
// offset 4*i.

enum class Opcode : uint8_t {
    Loadi, Mov,
    Add, Sub, Mul, And, Or, Xor, Shl, Shr,
    Load, Store,
    Beq, Bne, Blt,
    Jmp, Call, Ret,
    Push, Pop,
    Alloc, Free,
    In, Rand, Feat,
    Halt,
};

struct Instruction {
    Opcode op = Opcode::Halt;
    uint8_t r0 = 0;        // destination / first operand register
    uint8_t r1 = 0;
    uint8_t r2 = 0;
    int64_t imm = 0;       // LOADI value, LOAD/STORE displacement, IN/FEAT index
    uint32_t target = 0;   // resolved instruction index for BEQ/BNE/BLT/JMP/CALL

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct Program {
    std::string name;
    std::vector<Instruction> instructions;
    uint32_t entry = 0;

    friend bool operator==(const Program&, const Program&) = default;
};

struct AsmError : std::runtime_error {
    AsmError(const std::string& message, int line)
        : std::runtime_error("line " + std::to_string(line) + ": " + message), line(line) {}
    int line;
};

// Assembles the line-oriented text format:
//   - one instruction per line, operands comma separated (registers r0..r15,
//     decimal or 0x-hex immediates, memory operands [rN], [rN+imm], [rN-imm])
//   - "label:" defines a label, either alone on a line or prefixing an
//     instruction; branch targets are labels
//   - ".entry label" selects the entry point (defaults to the first
//     instruction)
//   - everything from ";" to the end of the line is a comment
// Exactly one HALT must be present. Errors carry 1-based line numbers.
Program assemble(std::string_view text, std::string name = "program");

// Canonical text form; assemble(disassemble(p)) reproduces p exactly
// (original label names are not retained).
std::string disassemble(const Program& program);

// ---------------------------------------------------------------------------
// Execution

// Inputs that stand in for environment-provided values. RAND consumes
// rand_values in order and faults on exhaustion; with an empty list it draws
// from a deterministic stream keyed by (seed, testcase id). FEAT reads the
// feature map (missing keys read as zero).
struct Overrides {
    std::vector<uint64_t> rand_values;
    std::map<uint32_t, uint64_t> features;
    uint64_t seed = 0;
};

struct VmError : std::runtime_error {
    enum class Kind { MemoryFault, RandExhausted, StepCap };

    VmError(Kind kind, const std::string& message, uint32_t testcase_id, uint64_t pc)
        : std::runtime_error(message), kind(kind), testcase_id(testcase_id), pc(pc) {}

    Kind kind;
    uint32_t testcase_id;
    uint64_t pc;
};

namespace vm_layout {

inline constexpr uint64_t kImageBase = 0x400000;
inline constexpr uint64_t kCodeSize = 0x10000;    // up to 16384 instructions
inline constexpr uint64_t kDataOffset = 0x10000;  // static data section within image 0
inline constexpr uint64_t kDataSize = 0x10000;
inline constexpr uint64_t kImageSize = kDataOffset + kDataSize;
inline constexpr uint64_t kDataBase = kImageBase + kDataOffset;
inline constexpr uint64_t kStackWindow = uint64_t{1} << 20;
inline constexpr uint64_t kStepCap = 10'000'000;
inline constexpr size_t kMaxTestcaseBytes = 4096;

// Address-space randomization stand-in: stack top and heap base are derived
// from the run nonce, image 0 stays fixed.
uint64_t stack_top(uint64_t run_nonce);
uint64_t heap_base(uint64_t run_nonce);

}  // namespace vm_layout

// Executes one test case on a fresh machine state and returns the records
// spanning TestcaseStart(testcase_id) .. TestcaseEnd(testcase_id). Execution
// is capped at 10^7 steps. Throws VmError on memory faults, RAND exhaustion
// or step-cap overrun.
std::vector<RawTraceRecord> run(const Program& program, std::span<const uint8_t> testcase,
                                const Overrides& overrides, uint64_t run_nonce,
                                uint32_t testcase_id);

// Runs every test case (id = index) and produces a full raw trace: the common
// prefix (image table, initial stack pointer) followed by the per-case
// segments in order. Cases execute independently and may run in parallel.
std::vector<RawTraceRecord> trace_program(const Program& program,
                                          const std::vector<std::vector<uint8_t>>& testcases,
                                          const Overrides& overrides, uint64_t run_nonce);

// ---------------------------------------------------------------------------
// Corpus

struct CorpusInfo {
    std::string name;
    std::string file;                           // .mw asset name
    size_t input_len = 8;                       // suggested test-case length
    std::string leak_class;                     // "control_flow", "memory" or "none"
    std::vector<uint32_t> leaking_instructions; // instruction indices
    std::string notes;
};

struct CorpusProgram {
    Program program;
    std::string text;
    CorpusInfo info;
};

// Built-in programs with known leakage structure. The same texts ship as
// corpus/*.mw with a JSON manifest mirroring CorpusInfo.
const std::vector<CorpusProgram>& corpus();
const CorpusProgram* find_corpus_program(std::string_view name);

}  // namespace leakscope

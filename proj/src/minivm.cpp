#include "leakscope/minivm.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <exception>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>

namespace leakscope {

namespace {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t state = a ^ (b * 0xff51afd7ed558ccdULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(state);
}

}  // namespace

namespace vm_layout {

uint64_t stack_top(uint64_t run_nonce) {
    return 0x7ffffff00000ULL - (mix(run_nonce, 0x57ac) & 0xFFFFF) * 16;
}

uint64_t heap_base(uint64_t run_nonce) {
    return 0x100000000ULL + (mix(run_nonce, 0x4ea9) & 0xFFFFF) * 64;
}

}  // namespace vm_layout

// ---------------------------------------------------------------------------
// Assembler

namespace {

enum class OperandShape {
    None,         // RET, HALT
    Reg,          // PUSH r / POP r / FREE r / RAND r
    RegReg,       // MOV rd, rs / ALLOC rd, rsize
    RegRegReg,    // ALU ops
    RegImm,       // LOADI r, imm / IN r, idx / FEAT r, k
    RegMem,       // LOAD rd, [rb+imm]
    MemReg,       // STORE [rb+imm], rs
    RegRegLabel,  // conditional branches
    Label,        // JMP / CALL
};

struct MnemonicInfo {
    const char* name;
    Opcode op;
    OperandShape shape;
};

constexpr MnemonicInfo kMnemonics[] = {
    {"LOADI", Opcode::Loadi, OperandShape::RegImm},
    {"MOV", Opcode::Mov, OperandShape::RegReg},
    {"ADD", Opcode::Add, OperandShape::RegRegReg},
    {"SUB", Opcode::Sub, OperandShape::RegRegReg},
    {"MUL", Opcode::Mul, OperandShape::RegRegReg},
    {"AND", Opcode::And, OperandShape::RegRegReg},
    {"OR", Opcode::Or, OperandShape::RegRegReg},
    {"XOR", Opcode::Xor, OperandShape::RegRegReg},
    {"SHL", Opcode::Shl, OperandShape::RegRegReg},
    {"SHR", Opcode::Shr, OperandShape::RegRegReg},
    {"LOAD", Opcode::Load, OperandShape::RegMem},
    {"STORE", Opcode::Store, OperandShape::MemReg},
    {"BEQ", Opcode::Beq, OperandShape::RegRegLabel},
    {"BNE", Opcode::Bne, OperandShape::RegRegLabel},
    {"BLT", Opcode::Blt, OperandShape::RegRegLabel},
    {"JMP", Opcode::Jmp, OperandShape::Label},
    {"CALL", Opcode::Call, OperandShape::Label},
    {"RET", Opcode::Ret, OperandShape::None},
    {"PUSH", Opcode::Push, OperandShape::Reg},
    {"POP", Opcode::Pop, OperandShape::Reg},
    {"ALLOC", Opcode::Alloc, OperandShape::RegReg},
    {"FREE", Opcode::Free, OperandShape::Reg},
    {"IN", Opcode::In, OperandShape::RegImm},
    {"RAND", Opcode::Rand, OperandShape::Reg},
    {"FEAT", Opcode::Feat, OperandShape::RegImm},
    {"HALT", Opcode::Halt, OperandShape::None},
};

const MnemonicInfo* find_mnemonic(std::string_view upper) {
    for (const MnemonicInfo& info : kMnemonics)
        if (upper == info.name) return &info;
    return nullptr;
}

const MnemonicInfo& mnemonic_for(Opcode op) {
    for (const MnemonicInfo& info : kMnemonics)
        if (info.op == op) return info;
    throw std::logic_error("unmapped opcode");
}

std::string upper_copy(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

bool is_label_name(std::string_view s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
    });
}

uint8_t parse_register(std::string_view token, int line) {
    std::string t = upper_copy(trim(token));
    if (t.size() < 2 || t[0] != 'R')
        throw AsmError("expected register, got '" + std::string(token) + "'", line);
    int value = 0;
    for (size_t i = 1; i < t.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(t[i])))
            throw AsmError("bad register '" + std::string(token) + "'", line);
        value = value * 10 + (t[i] - '0');
        if (value > 15) throw AsmError("bad register '" + std::string(token) + "'", line);
    }
    return static_cast<uint8_t>(value);
}

int64_t parse_immediate(std::string_view token, int line) {
    std::string t(trim(token));
    if (t.empty()) throw AsmError("expected immediate", line);
    bool negative = t[0] == '-';
    std::string_view digits = negative ? std::string_view(t).substr(1) : std::string_view(t);
    int base = 10;
    if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
        base = 16;
        digits.remove_prefix(2);
    }
    if (digits.empty()) throw AsmError("bad immediate '" + t + "'", line);
    uint64_t value = 0;
    for (char c : digits) {
        int digit;
        if (std::isdigit(static_cast<unsigned char>(c)))
            digit = c - '0';
        else if (base == 16 && std::isxdigit(static_cast<unsigned char>(c)))
            digit = 10 + (std::tolower(static_cast<unsigned char>(c)) - 'a');
        else
            throw AsmError("bad immediate '" + t + "'", line);
        value = value * base + static_cast<uint64_t>(digit);
    }
    int64_t result = static_cast<int64_t>(value);
    return negative ? -result : result;
}

// Parses "[rN]", "[rN+imm]" or "[rN-imm]" into base register and displacement.
std::pair<uint8_t, int64_t> parse_mem_operand(std::string_view token, int line) {
    std::string_view t = trim(token);
    if (t.size() < 3 || t.front() != '[' || t.back() != ']')
        throw AsmError("expected memory operand, got '" + std::string(token) + "'", line);
    std::string_view inner = trim(t.substr(1, t.size() - 2));
    size_t split = inner.find_first_of("+-");
    if (split == std::string_view::npos) return {parse_register(inner, line), 0};
    uint8_t base = parse_register(inner.substr(0, split), line);
    int64_t disp = parse_immediate(inner.substr(split + 1), line);
    if (inner[split] == '-') disp = -disp;
    return {base, disp};
}

std::vector<std::string_view> split_operands(std::string_view rest) {
    std::vector<std::string_view> out;
    size_t start = 0;
    while (start <= rest.size()) {
        size_t comma = rest.find(',', start);
        if (comma == std::string_view::npos) {
            std::string_view piece = trim(rest.substr(start));
            if (!piece.empty()) out.push_back(piece);
            break;
        }
        out.push_back(trim(rest.substr(start, comma - start)));
        start = comma + 1;
    }
    return out;
}

}  // namespace

Program assemble(std::string_view text, std::string name) {
    Program program;
    program.name = std::move(name);

    struct PendingLabel {
        size_t instruction;
        std::string label;
        int line;
    };
    std::unordered_map<std::string, uint32_t> labels;
    std::vector<PendingLabel> pending;
    std::string entry_label;
    int entry_line = 0;
    int halt_line = 0;
    int halt_count = 0;

    std::istringstream stream{std::string(text)};
    std::string raw_line;
    int line_no = 0;
    while (std::getline(stream, raw_line)) {
        ++line_no;
        std::string_view line(raw_line);
        if (size_t comment = line.find(';'); comment != std::string_view::npos)
            line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;

        if (line.starts_with(".entry")) {
            std::string_view rest = trim(line.substr(6));
            if (!is_label_name(rest)) throw AsmError("bad .entry directive", line_no);
            entry_label = std::string(rest);
            entry_line = line_no;
            continue;
        }

        // Leading "label:" definitions, possibly followed by an instruction.
        while (true) {
            size_t colon = line.find(':');
            if (colon == std::string_view::npos) break;
            std::string_view candidate = trim(line.substr(0, colon));
            if (!is_label_name(candidate)) break;
            std::string label(candidate);
            if (labels.contains(label))
                throw AsmError("duplicate label '" + label + "'", line_no);
            labels[label] = static_cast<uint32_t>(program.instructions.size());
            line = trim(line.substr(colon + 1));
        }
        if (line.empty()) continue;

        size_t mnemonic_end = line.find_first_of(" \t");
        std::string_view mnemonic = line.substr(0, mnemonic_end);
        std::string_view rest =
            mnemonic_end == std::string_view::npos ? std::string_view{} : line.substr(mnemonic_end);
        const MnemonicInfo* info = find_mnemonic(upper_copy(mnemonic));
        if (!info)
            throw AsmError("unknown mnemonic '" + std::string(mnemonic) + "'", line_no);

        std::vector<std::string_view> ops = split_operands(trim(rest));
        auto expect = [&](size_t n) {
            if (ops.size() != n)
                throw AsmError(std::string(info->name) + " expects " + std::to_string(n) +
                                   " operand(s), got " + std::to_string(ops.size()),
                               line_no);
        };

        Instruction ins;
        ins.op = info->op;
        switch (info->shape) {
            case OperandShape::None:
                expect(0);
                break;
            case OperandShape::Reg:
                expect(1);
                ins.r0 = parse_register(ops[0], line_no);
                break;
            case OperandShape::RegReg:
                expect(2);
                ins.r0 = parse_register(ops[0], line_no);
                ins.r1 = parse_register(ops[1], line_no);
                break;
            case OperandShape::RegRegReg:
                expect(3);
                ins.r0 = parse_register(ops[0], line_no);
                ins.r1 = parse_register(ops[1], line_no);
                ins.r2 = parse_register(ops[2], line_no);
                break;
            case OperandShape::RegImm:
                expect(2);
                ins.r0 = parse_register(ops[0], line_no);
                ins.imm = parse_immediate(ops[1], line_no);
                if ((ins.op == Opcode::In || ins.op == Opcode::Feat) && ins.imm < 0)
                    throw AsmError("index must be non-negative", line_no);
                break;
            case OperandShape::RegMem: {
                expect(2);
                ins.r0 = parse_register(ops[0], line_no);
                auto [base, disp] = parse_mem_operand(ops[1], line_no);
                ins.r1 = base;
                ins.imm = disp;
                break;
            }
            case OperandShape::MemReg: {
                expect(2);
                auto [base, disp] = parse_mem_operand(ops[0], line_no);
                ins.r0 = base;
                ins.imm = disp;
                ins.r1 = parse_register(ops[1], line_no);
                break;
            }
            case OperandShape::RegRegLabel:
                expect(3);
                ins.r0 = parse_register(ops[0], line_no);
                ins.r1 = parse_register(ops[1], line_no);
                if (!is_label_name(ops[2]))
                    throw AsmError("expected label, got '" + std::string(ops[2]) + "'", line_no);
                pending.push_back(
                    {program.instructions.size(), std::string(ops[2]), line_no});
                break;
            case OperandShape::Label:
                expect(1);
                if (!is_label_name(ops[0]))
                    throw AsmError("expected label, got '" + std::string(ops[0]) + "'", line_no);
                pending.push_back(
                    {program.instructions.size(), std::string(ops[0]), line_no});
                break;
        }
        if (ins.op == Opcode::Halt) {
            ++halt_count;
            if (halt_count > 1) throw AsmError("program must contain exactly one HALT", line_no);
            halt_line = line_no;
        }
        if (program.instructions.size() >= vm_layout::kCodeSize / 4)
            throw AsmError("program exceeds the code section", line_no);
        program.instructions.push_back(ins);
    }

    for (const PendingLabel& p : pending) {
        auto it = labels.find(p.label);
        if (it == labels.end())
            throw AsmError("unresolved label '" + p.label + "'", p.line);
        if (it->second >= program.instructions.size())
            throw AsmError("label '" + p.label + "' points past the last instruction", p.line);
        program.instructions[p.instruction].target = it->second;
    }
    if (!entry_label.empty()) {
        auto it = labels.find(entry_label);
        if (it == labels.end())
            throw AsmError("unresolved label '" + entry_label + "'", entry_line);
        program.entry = it->second;
    }
    if (halt_count != 1)
        throw AsmError("program must contain exactly one HALT", std::max(halt_line, line_no));
    return program;
}

std::string disassemble(const Program& program) {
    // Regenerate labels for every branch/call target plus the entry point.
    std::set<uint32_t> targets;
    for (const Instruction& ins : program.instructions) {
        switch (ins.op) {
            case Opcode::Beq:
            case Opcode::Bne:
            case Opcode::Blt:
            case Opcode::Jmp:
            case Opcode::Call:
                targets.insert(ins.target);
                break;
            default:
                break;
        }
    }
    if (program.entry != 0) targets.insert(program.entry);
    std::unordered_map<uint32_t, std::string> label_of;
    size_t counter = 0;
    for (uint32_t t : targets) label_of[t] = "L" + std::to_string(counter++);

    auto imm_text = [](int64_t imm) {
        if (imm >= 0 && imm < 0x10000) return std::to_string(imm);
        std::ostringstream os;
        os << "0x" << std::hex << static_cast<uint64_t>(imm);
        return os.str();
    };
    auto mem_text = [&](uint8_t base, int64_t disp) {
        std::string out = "[r" + std::to_string(base);
        if (disp > 0)
            out += "+" + imm_text(disp);
        else if (disp < 0)
            out += "-" + imm_text(-disp);
        return out + "]";
    };
    auto reg = [](uint8_t r) { return "r" + std::to_string(r); };

    std::ostringstream os;
    if (program.entry != 0) os << ".entry " << label_of[program.entry] << "\n";
    for (size_t i = 0; i < program.instructions.size(); ++i) {
        if (auto it = label_of.find(static_cast<uint32_t>(i)); it != label_of.end())
            os << it->second << ":\n";
        const Instruction& ins = program.instructions[i];
        const MnemonicInfo& info = mnemonic_for(ins.op);
        os << "    " << info.name;
        switch (info.shape) {
            case OperandShape::None:
                break;
            case OperandShape::Reg:
                os << " " << reg(ins.r0);
                break;
            case OperandShape::RegReg:
                os << " " << reg(ins.r0) << ", " << reg(ins.r1);
                break;
            case OperandShape::RegRegReg:
                os << " " << reg(ins.r0) << ", " << reg(ins.r1) << ", " << reg(ins.r2);
                break;
            case OperandShape::RegImm:
                os << " " << reg(ins.r0) << ", " << imm_text(ins.imm);
                break;
            case OperandShape::RegMem:
                os << " " << reg(ins.r0) << ", " << mem_text(ins.r1, ins.imm);
                break;
            case OperandShape::MemReg:
                os << " " << mem_text(ins.r0, ins.imm) << ", " << reg(ins.r1);
                break;
            case OperandShape::RegRegLabel:
                os << " " << reg(ins.r0) << ", " << reg(ins.r1) << ", " << label_of[ins.target];
                break;
            case OperandShape::Label:
                os << " " << label_of[ins.target];
                break;
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Interpreter

namespace {

// Byte-addressable sparse memory backed by zero-initialized 4 KiB pages.
class SparseMemory {
public:
    uint64_t load_u64(uint64_t addr) {
        if ((addr & kPageMask) <= kPageSize - 8) {
            const uint8_t* p = page(addr >> kPageBits) + (addr & kPageMask);
            uint64_t v;
            std::memcpy(&v, p, 8);
            return v;
        }
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(byte_at(addr + static_cast<uint64_t>(i))) << (8 * i);
        return v;
    }

    void store_u64(uint64_t addr, uint64_t value) {
        if ((addr & kPageMask) <= kPageSize - 8) {
            uint8_t* p = page(addr >> kPageBits) + (addr & kPageMask);
            std::memcpy(p, &value, 8);
            return;
        }
        for (int i = 0; i < 8; ++i)
            byte_at(addr + static_cast<uint64_t>(i)) = static_cast<uint8_t>(value >> (8 * i));
    }

private:
    static constexpr uint64_t kPageBits = 12;
    static constexpr uint64_t kPageSize = uint64_t{1} << kPageBits;
    static constexpr uint64_t kPageMask = kPageSize - 1;

    uint8_t* page(uint64_t index) {
        auto& slot = pages_[index];
        if (!slot) slot = std::make_unique<std::array<uint8_t, kPageSize>>();
        return slot->data();
    }

    uint8_t& byte_at(uint64_t addr) { return page(addr >> kPageBits)[addr & kPageMask]; }

    std::unordered_map<uint64_t, std::unique_ptr<std::array<uint8_t, kPageSize>>> pages_;
};

struct Machine {
    const Program& program;
    std::span<const uint8_t> input;
    const Overrides& overrides;
    uint32_t testcase_id;
    std::vector<RawTraceRecord>& out;

    std::array<uint64_t, 16> regs{};
    uint32_t pc;
    uint64_t sp;
    uint64_t stack_top;
    uint64_t stack_limit;
    uint64_t heap_bump;
    uint64_t heap_limit;
    std::map<uint64_t, uint64_t> heap_blocks;  // base -> size
    SparseMemory memory;
    size_t rand_pos = 0;
    uint64_t rand_state;

    Machine(const Program& program, std::span<const uint8_t> input, const Overrides& overrides,
            uint64_t run_nonce, uint32_t testcase_id, std::vector<RawTraceRecord>& out)
        : program(program),
          input(input),
          overrides(overrides),
          testcase_id(testcase_id),
          out(out),
          pc(program.entry),
          sp(vm_layout::stack_top(run_nonce)),
          stack_top(sp),
          stack_limit(sp - vm_layout::kStackWindow),
          heap_bump(vm_layout::heap_base(run_nonce)),
          heap_limit(heap_bump + (uint64_t{1} << 30)),
          rand_state(mix(overrides.seed, 0xD1CEULL + testcase_id)) {}

    [[noreturn]] void fault(const std::string& message) const {
        std::ostringstream os;
        os << "memory fault in test case " << testcase_id << " at instruction " << pc << ": "
           << message;
        throw VmError(VmError::Kind::MemoryFault, os.str(), testcase_id, pc);
    }

    AbsCodeRef code_ref(uint32_t index) const { return {0, static_cast<uint64_t>(index) * 4}; }

    // LOAD/STORE targets must fall entirely inside the stack window, a live
    // heap block or the static data section.
    void check_data_access(uint64_t addr) const {
        if (addr + 8 < addr) fault("access wraps the address space");
        if (addr >= stack_limit && addr + 8 <= stack_top) return;
        if (addr >= vm_layout::kDataBase && addr + 8 <= vm_layout::kImageBase + vm_layout::kImageSize)
            return;
        auto it = heap_blocks.upper_bound(addr);
        if (it != heap_blocks.begin()) {
            --it;
            if (addr >= it->first && addr + 8 <= it->first + it->second) return;
        }
        std::ostringstream os;
        os << "access to unmapped address 0x" << std::hex << addr;
        fault(os.str());
    }

    void push_word(uint64_t value) {
        if (sp - 8 < stack_limit) fault("stack overflow");
        sp -= 8;
        memory.store_u64(sp, value);
    }

    uint64_t pop_word() {
        if (sp + 8 > stack_top) fault("stack underflow");
        uint64_t value = memory.load_u64(sp);
        sp += 8;
        return value;
    }

    uint64_t next_rand() {
        if (!overrides.rand_values.empty()) {
            if (rand_pos >= overrides.rand_values.size())
                throw VmError(VmError::Kind::RandExhausted,
                              "RAND override list exhausted in test case " +
                                  std::to_string(testcase_id),
                              testcase_id, pc);
            return overrides.rand_values[rand_pos++];
        }
        return splitmix64(rand_state);
    }

    uint64_t input_word(int64_t index) const {
        uint64_t value = 0;
        size_t base = static_cast<size_t>(index) * 8;
        for (size_t i = 0; i < 8; ++i) {
            size_t pos = base + i;
            if (pos < input.size()) value |= static_cast<uint64_t>(input[pos]) << (8 * i);
        }
        return value;
    }

    void execute() {
        out.push_back(RawTraceRecord::testcase_start(testcase_id));
        uint64_t steps = 0;
        bool halted = false;
        while (!halted) {
            if (++steps > vm_layout::kStepCap)
                throw VmError(VmError::Kind::StepCap,
                              "step cap exceeded in test case " + std::to_string(testcase_id),
                              testcase_id, pc);
            if (pc >= program.instructions.size()) fault("execution left the program");
            const Instruction& ins = program.instructions[pc];
            const AbsCodeRef here = code_ref(pc);
            uint32_t next = pc + 1;
            switch (ins.op) {
                case Opcode::Loadi:
                    regs[ins.r0] = static_cast<uint64_t>(ins.imm);
                    break;
                case Opcode::Mov:
                    regs[ins.r0] = regs[ins.r1];
                    break;
                case Opcode::Add:
                    regs[ins.r0] = regs[ins.r1] + regs[ins.r2];
                    break;
                case Opcode::Sub:
                    regs[ins.r0] = regs[ins.r1] - regs[ins.r2];
                    break;
                case Opcode::Mul:
                    regs[ins.r0] = regs[ins.r1] * regs[ins.r2];
                    break;
                case Opcode::And:
                    regs[ins.r0] = regs[ins.r1] & regs[ins.r2];
                    break;
                case Opcode::Or:
                    regs[ins.r0] = regs[ins.r1] | regs[ins.r2];
                    break;
                case Opcode::Xor:
                    regs[ins.r0] = regs[ins.r1] ^ regs[ins.r2];
                    break;
                case Opcode::Shl:
                    regs[ins.r0] = regs[ins.r2] >= 64 ? 0 : regs[ins.r1] << regs[ins.r2];
                    break;
                case Opcode::Shr:
                    regs[ins.r0] = regs[ins.r2] >= 64 ? 0 : regs[ins.r1] >> regs[ins.r2];
                    break;
                case Opcode::Load: {
                    uint64_t addr = regs[ins.r1] + static_cast<uint64_t>(ins.imm);
                    check_data_access(addr);
                    out.push_back(RawTraceRecord::mem_read(here, addr));
                    regs[ins.r0] = memory.load_u64(addr);
                    break;
                }
                case Opcode::Store: {
                    uint64_t addr = regs[ins.r0] + static_cast<uint64_t>(ins.imm);
                    check_data_access(addr);
                    out.push_back(RawTraceRecord::mem_write(here, addr));
                    memory.store_u64(addr, regs[ins.r1]);
                    break;
                }
                case Opcode::Beq:
                case Opcode::Bne:
                case Opcode::Blt: {
                    bool taken;
                    if (ins.op == Opcode::Beq)
                        taken = regs[ins.r0] == regs[ins.r1];
                    else if (ins.op == Opcode::Bne)
                        taken = regs[ins.r0] != regs[ins.r1];
                    else
                        taken = regs[ins.r0] < regs[ins.r1];
                    uint32_t dst = taken ? ins.target : next;
                    out.push_back(RawTraceRecord::make_branch(
                        taken ? BranchKind::CondTaken : BranchKind::CondNotTaken, here,
                        code_ref(dst)));
                    next = dst;
                    break;
                }
                case Opcode::Jmp:
                    out.push_back(
                        RawTraceRecord::make_branch(BranchKind::Jump, here, code_ref(ins.target)));
                    next = ins.target;
                    break;
                case Opcode::Call:
                    out.push_back(
                        RawTraceRecord::make_branch(BranchKind::Call, here, code_ref(ins.target)));
                    push_word(next);
                    out.push_back(RawTraceRecord::stack_ptr(sp));
                    next = ins.target;
                    break;
                case Opcode::Ret: {
                    uint64_t index = pop_word();
                    if (index >= program.instructions.size()) fault("return to invalid instruction");
                    out.push_back(RawTraceRecord::make_branch(
                        BranchKind::Return, here, code_ref(static_cast<uint32_t>(index))));
                    out.push_back(RawTraceRecord::stack_ptr(sp));
                    next = static_cast<uint32_t>(index);
                    break;
                }
                case Opcode::Push:
                    push_word(regs[ins.r0]);
                    out.push_back(RawTraceRecord::stack_ptr(sp));
                    break;
                case Opcode::Pop:
                    regs[ins.r0] = pop_word();
                    out.push_back(RawTraceRecord::stack_ptr(sp));
                    break;
                case Opcode::Alloc: {
                    uint64_t size = regs[ins.r1];
                    out.push_back(RawTraceRecord::alloc_size(size));
                    if (size > heap_limit - heap_bump) fault("heap exhausted");
                    uint64_t base = heap_bump;
                    heap_bump = (base + size + 63) & ~uint64_t{63};
                    heap_blocks[base] = size;
                    regs[ins.r0] = base;
                    out.push_back(RawTraceRecord::alloc_addr(base));
                    break;
                }
                case Opcode::Free: {
                    uint64_t addr = regs[ins.r0];
                    if (!heap_blocks.contains(addr)) fault("FREE of an address that is not a live block base");
                    heap_blocks.erase(addr);
                    out.push_back(RawTraceRecord::free_addr(addr));
                    break;
                }
                case Opcode::In:
                    regs[ins.r0] = input_word(ins.imm);
                    break;
                case Opcode::Rand:
                    regs[ins.r0] = next_rand();
                    break;
                case Opcode::Feat: {
                    auto it = overrides.features.find(static_cast<uint32_t>(ins.imm));
                    regs[ins.r0] = it == overrides.features.end() ? 0 : it->second;
                    break;
                }
                case Opcode::Halt:
                    halted = true;
                    break;
            }
            pc = next;
        }
        out.push_back(RawTraceRecord::testcase_end(testcase_id));
    }
};

}  // namespace

std::vector<RawTraceRecord> run(const Program& program, std::span<const uint8_t> testcase,
                                const Overrides& overrides, uint64_t run_nonce,
                                uint32_t testcase_id) {
    if (testcase.size() > vm_layout::kMaxTestcaseBytes)
        throw std::invalid_argument("test case exceeds " +
                                    std::to_string(vm_layout::kMaxTestcaseBytes) + " bytes");
    if (program.instructions.empty()) throw std::invalid_argument("empty program");
    std::vector<RawTraceRecord> records;
    Machine machine(program, testcase, overrides, run_nonce, testcase_id, records);
    machine.execute();
    return records;
}

std::vector<RawTraceRecord> trace_program(const Program& program,
                                          const std::vector<std::vector<uint8_t>>& testcases,
                                          const Overrides& overrides, uint64_t run_nonce) {
    std::vector<std::vector<RawTraceRecord>> segments(testcases.size());
    std::exception_ptr first_error;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(testcases.size()); ++i) {
        try {
            segments[static_cast<size_t>(i)] =
                run(program, testcases[static_cast<size_t>(i)], overrides, run_nonce,
                    static_cast<uint32_t>(i));
        } catch (...) {
#pragma omp critical(leakscope_trace_error)
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);

    std::vector<RawTraceRecord> records;
    size_t total = 2;
    for (const auto& segment : segments) total += segment.size();
    records.reserve(total);
    records.push_back(RawTraceRecord::image_load(0, vm_layout::kImageBase, vm_layout::kImageSize,
                                                 program.name));
    records.push_back(RawTraceRecord::stack_ptr(vm_layout::stack_top(run_nonce)));
    for (auto& segment : segments)
        records.insert(records.end(), std::make_move_iterator(segment.begin()),
                       std::make_move_iterator(segment.end()));
    return records;
}

}  // namespace leakscope

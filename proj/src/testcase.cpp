#include "leakscope/testcase.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

namespace leakscope {

namespace fs = std::filesystem;

const char* to_string(TestcaseSource source) {
    switch (source) {
        case TestcaseSource::Random: return "random";
        case TestcaseSource::Template: return "template";
        case TestcaseSource::Directory: return "directory";
    }
    return "?";
}

namespace {

// Value-space size for uniqueness feasibility; saturates at 2^64-1 which is
// more cases than anyone can ask for.
uint64_t value_space(size_t random_bytes) {
    if (random_bytes >= 8) return UINT64_MAX;
    return uint64_t{1} << (8 * random_bytes);
}

// mt19937_64 has a portable output sequence, so sets regenerate identically
// across platforms. Bytes come from successive 64-bit draws, little end first.
class ByteStream {
public:
    explicit ByteStream(uint64_t seed) : engine_(seed) {}

    uint8_t next() {
        if (have_ == 0) {
            word_ = engine_();
            have_ = 8;
        }
        uint8_t b = static_cast<uint8_t>(word_);
        word_ >>= 8;
        --have_;
        return b;
    }

private:
    std::mt19937_64 engine_;
    uint64_t word_ = 0;
    int have_ = 0;
};

}  // namespace

TestcaseSet gen_random(size_t n, size_t len, uint64_t seed) {
    if (n < 1) throw TestcaseError("need at least one test case");
    if (len < 1) throw TestcaseError("test-case length must be at least one byte");
    if (n > value_space(len))
        throw TestcaseError("cannot generate " + std::to_string(n) + " distinct cases of " +
                            std::to_string(len) + " byte(s): value space too small");
    TestcaseSet set;
    set.seed = seed;
    set.source = TestcaseSource::Random;
    ByteStream stream(seed);
    std::set<std::vector<uint8_t>> seen;
    while (set.cases.size() < n) {
        std::vector<uint8_t> candidate(len);
        for (uint8_t& b : candidate) b = stream.next();
        if (seen.insert(candidate).second) set.cases.push_back(std::move(candidate));
    }
    return set;
}

TestcaseSet gen_template(const std::string& hex_template, size_t n, uint64_t seed) {
    // Parse the template into fixed bytes plus wildcard positions.
    std::vector<uint8_t> fixed;
    std::vector<size_t> wildcard_at;
    std::string compact;
    for (char c : hex_template)
        if (!std::isspace(static_cast<unsigned char>(c))) compact.push_back(c);
    if (compact.size() % 2 != 0)
        throw TestcaseError("template must have an even number of hex digits");
    auto nibble = [&](char c) -> int {
        if (std::isdigit(static_cast<unsigned char>(c))) return c - '0';
        char l = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (l >= 'a' && l <= 'f') return 10 + (l - 'a');
        throw TestcaseError(std::string("bad template character '") + c + "'");
    };
    for (size_t i = 0; i < compact.size(); i += 2) {
        if (compact[i] == '?' || compact[i + 1] == '?') {
            if (compact[i] != '?' || compact[i + 1] != '?')
                throw TestcaseError("wildcards must cover whole bytes (\"??\")");
            wildcard_at.push_back(fixed.size());
            fixed.push_back(0);
        } else {
            fixed.push_back(static_cast<uint8_t>(nibble(compact[i]) * 16 + nibble(compact[i + 1])));
        }
    }
    if (wildcard_at.empty()) throw TestcaseError("template has no wildcard bytes");
    if (n < 1) throw TestcaseError("need at least one test case");
    if (n > value_space(wildcard_at.size()))
        throw TestcaseError("cannot generate " + std::to_string(n) +
                            " distinct cases over " + std::to_string(wildcard_at.size()) +
                            " wildcard byte(s)");

    TestcaseSet set;
    set.seed = seed;
    set.source = TestcaseSource::Template;
    ByteStream stream(seed);
    std::set<std::vector<uint8_t>> seen;  // wildcard projections
    while (set.cases.size() < n) {
        std::vector<uint8_t> projection(wildcard_at.size());
        for (uint8_t& b : projection) b = stream.next();
        if (!seen.insert(projection).second) continue;
        std::vector<uint8_t> candidate = fixed;
        for (size_t i = 0; i < wildcard_at.size(); ++i) candidate[wildcard_at[i]] = projection[i];
        set.cases.push_back(std::move(candidate));
    }
    return set;
}

TestcaseSet load_dir(const std::string& path) {
    if (!fs::is_directory(path)) throw TestcaseError("not a directory: " + path);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_regular_file()) files.push_back(entry.path());
    if (files.empty()) throw TestcaseError("directory contains no regular files: " + path);
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

    TestcaseSet set;
    set.source = TestcaseSource::Directory;
    std::map<std::vector<uint8_t>, std::string> seen;
    for (const fs::path& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw TestcaseError("cannot read " + file.string());
        std::vector<uint8_t> content{std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>()};
        auto [it, inserted] = seen.emplace(content, file.filename().string());
        if (!inserted)
            throw TestcaseError("duplicate test-case contents: " + it->second + " and " +
                                file.filename().string());
        set.cases.push_back(std::move(content));
    }
    return set;
}

}  // namespace leakscope

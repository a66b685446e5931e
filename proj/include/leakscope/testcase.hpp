#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace leakscope {

enum class TestcaseSource : uint8_t { Random, Template, Directory };

const char* to_string(TestcaseSource source);

// An ordered set of pairwise-distinct secret inputs. Generation is
// deterministic for a fixed seed.
struct TestcaseSet {
    std::vector<std::vector<uint8_t>> cases;
    uint64_t seed = 0;
    TestcaseSource source = TestcaseSource::Random;
};

struct TestcaseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// n distinct uniformly distributed byte strings of the given length.
// Duplicates are regenerated rather than rejected so exactly n cases come
// back. Throws TestcaseError when n exceeds the 256^len value space.
TestcaseSet gen_random(size_t n, size_t len, uint64_t seed);

// Template source: a hex string where each byte is either two hex digits
// (kept constant) or "??" (randomized), e.g. "AB??" fixes the first byte to
// 0xAB. At least one wildcard byte is required; uniqueness is enforced over
// the wildcard projection.
TestcaseSet gen_template(const std::string& hex_template, size_t n, uint64_t seed);

// Loads every regular file of a directory in lexicographic name order.
// Rejects empty directories and duplicate file contents (the error names
// both files).
TestcaseSet load_dir(const std::string& path);

}  // namespace leakscope

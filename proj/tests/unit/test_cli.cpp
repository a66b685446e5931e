#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include <unistd.h>

// End-to-end checks against the installed CLI binary.

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("leakscope_cli_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

int run_cli(const std::string& args) {
    std::string command = std::string(LEAKSCOPE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string run_cli_capture(const std::string& args, const fs::path& capture) {
    std::string command =
        std::string(LEAKSCOPE_CLI_PATH) + " " + args + " > " + capture.string() + " 2>&1";
    [[maybe_unused]] int status = std::system(command.c_str());
    std::ifstream in(capture);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("cli pipeline runs end to end") {
    TempDir dir("pipeline");
    std::string out = (dir.path / "out").string();
    CHECK(run_cli("pipeline --program ct_select --n 8 --len 16 --seed 3 --out " + out) == 0);
    CHECK(fs::exists(out + "/report.json"));
    CHECK(fs::exists(out + "/report.txt"));
    CHECK(fs::exists(out + "/annotations.csv"));
    CHECK(fs::exists(out + "/raw.trace"));

    // Re-analysis with a different granularity re-uses the persisted traces.
    auto raw_mtime = fs::last_write_time(out + "/raw.trace");
    CHECK(run_cli("report --granularity 64 --out " + out) == 0);
    CHECK(fs::last_write_time(out + "/raw.trace") == raw_mtime);

    CHECK(run_cli("analyze mi-trace --out " + out) == 0);
    CHECK(run_cli("analyze mi-instr --granularity 64 --out " + out) == 0);
}

TEST_CASE("cli compare reports identical ct_select traces") {
    TempDir dir("compare");
    std::string out = (dir.path / "out").string();
    REQUIRE(run_cli("pipeline --program ct_select --n 4 --len 16 --seed 1 --out " + out) == 0);
    std::string text =
        run_cli_capture("analyze compare --a 0 --b 1 --out " + out, dir.path / "cap.txt");
    CHECK(text.find("traces identical") != std::string::npos);
}

TEST_CASE("cli distinguishes usage errors from stage failures") {
    TempDir dir("errors");
    std::string out = (dir.path / "out").string();

    CHECK(run_cli("") == 1);                       // missing subcommand
    CHECK(run_cli("pipeline --program ct_select --n 1 --out " + out) == 1);   // config error
    CHECK(run_cli("pipeline --program no_such --out " + out) == 1);           // unknown program
    CHECK(run_cli("pipeline --program ct_select --granularity 3 --out " + out) == 1);

    // A corrupt raw trace fails in the ingest stage.
    fs::path bad = dir.path / "bad.trace";
    std::ofstream(bad) << "XXXXXX";
    CHECK(run_cli("ingest --raw " + bad.string() + " --out " + out) == 2);

    CHECK(run_cli("--help") == 0);
}

TEST_CASE("cli trace and ingest round-trip") {
    TempDir dir("roundtrip");
    std::string src = (dir.path / "src").string();
    std::string dst = (dir.path / "dst").string();
    REQUIRE(run_cli("trace --program ttable_lookup --n 8 --len 1 --seed 2 --out " + src) == 0);
    REQUIRE(fs::exists(src + "/raw.trace"));
    CHECK(run_cli("ingest --raw " + src + "/raw.trace --out " + dst) == 0);
    CHECK(run_cli("preprocess --out " + dst) == 0);
    CHECK(run_cli("report --granularity 64 --out " + dst) == 0);
    CHECK(fs::exists(dst + "/report.json"));
}

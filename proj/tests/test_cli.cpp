#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SAGEKEEP_CLI_PATH;

struct CommandResult {
    int exit_code;
    std::string output;
};

CommandResult run(const std::string& args) {
    const std::string cmd = kCli + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    std::string output;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), buf.size(), pipe)) output += buf.data();
    const int status = pclose(pipe);
    return CommandResult{WEXITSTATUS(status), output};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("sagekeep_cli_") + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string sub(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("help exits zero and lists subcommands") {
    const CommandResult r = run("--help");
    CHECK(r.exit_code == 0);
    for (const char* sub : {"synth", "train-oracle", "sage", "keep-aug", "train", "eval",
                            "render"})
        CHECK(r.output.find(sub) != std::string::npos);
}

TEST_CASE("sage --help lists the default epsilon") {
    const CommandResult r = run("sage --help");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("--epsilon") != std::string::npos);
    CHECK(r.output.find("0.05") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
    CHECK(run("").exit_code == 1);                        // missing subcommand
    CHECK(run("train-oracle").exit_code == 1);            // missing --manifest
    CHECK(run("synth --no-such-flag").exit_code == 1);    // unknown flag
    CHECK(run("frobnicate").exit_code == 1);              // unknown subcommand
}

TEST_CASE("data errors exit 2") {
    const CommandResult r = run("train-oracle --manifest /nonexistent/manifest.json");
    CHECK(r.exit_code == 2);
    CHECK(run("render --map /nonexistent.kcw1 --out /tmp/x.pgm").exit_code == 2);
}

TEST_CASE("full pipeline: synth, train-oracle, sage, train keep_core, eval, render") {
    TempDir dir("pipeline");
    const std::string cfg_path = dir.sub("config.json");
    {
        std::ofstream cfg(cfg_path);
        cfg << R"({
            "seed": 21,
            "oracle": {"hidden": 8, "depth": 3},
            "sage": {"steps": 60, "token_size": 8},
            "augment": {"kind": "gaussian_noise"},
            "training": {"epochs": 50, "batch": 4, "lr": 0.01, "lambda_dice": 2.0,
                          "eval_fraction": 0.25, "dice_gate": 0.5},
            "synthetic": {"core_token": [1, 1], "image_size": 32, "token_size": 8,
                           "contrast": 0.18, "count": 6}
        })";
    }

    CommandResult r =
        run("synth --config " + cfg_path + " --out " + dir.sub("data"));
    CHECK(r.exit_code == 0);
    const std::string manifest = dir.sub("data") + "/manifest.json";
    CHECK(fs::exists(manifest));

    r = run("train-oracle --config " + cfg_path + " --manifest " + manifest +
            " --weights-out " + dir.sub("oracle.skw"));
    REQUIRE(r.exit_code == 0);

    r = run("sage --config " + cfg_path + " --manifest " + manifest + " --weights " +
            dir.sub("oracle.skw") + " --workers 2 --out " + dir.sub("maps"));
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("maps") + "/synth-0000.kcw1"));

    r = run("train --config " + cfg_path + " --manifest " + manifest +
            " --mode keep_core --maps " + dir.sub("maps") + " --out " + dir.sub("run_kc"));
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("run_kc") + "/model.skw"));
    CHECK(fs::exists(dir.sub("run_kc") + "/report.csv"));
    CHECK(fs::exists(dir.sub("run_kc") + "/aggregate.csv"));

    r = run("eval --config " + cfg_path + " --manifest " + manifest + " --weights " +
            dir.sub("run_kc") + "/model.skw --split eval --out " + dir.sub("eval_out"));
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("eval_out") + "/report.csv"));

    r = run("render --map " + dir.sub("maps") + "/synth-0000.kcw1 --out " + dir.sub("map.pgm"));
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("map.pgm")));

    r = run("render --map " + dir.sub("maps") + "/synth-0000.kcw1 --image " + dir.sub("data") +
            "/images/synth-0000.kct1 --out " + dir.sub("overlay.ppm"));
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("overlay.ppm")));

    // keep-aug emits augmented tensors plus the audit side-car
    r = run("keep-aug --config " + cfg_path + " --manifest " + manifest + " --maps " +
            dir.sub("maps") + " --out " + dir.sub("aug_out"));
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir.sub("aug_out") + "/synth-0000.kct1"));
    CHECK(fs::exists(dir.sub("aug_out") + "/keep_audit.json"));

    // keep_core without maps is a data error
    r = run("train --config " + cfg_path + " --manifest " + manifest +
            " --mode keep_core --maps " + dir.sub("no_such_maps") + " --out " + dir.sub("x"));
    CHECK(r.exit_code == 2);
}

TEST_CASE("shipped defaults complete the full pipeline within budget") {
    TempDir dir("defaults");
    const auto start = std::chrono::steady_clock::now();

    CommandResult r = run("synth --seed 42 --out " + dir.sub("data"));
    REQUIRE(r.exit_code == 0);
    const std::string manifest = dir.sub("data") + "/manifest.json";

    r = run("train-oracle --seed 42 --manifest " + manifest + " --weights-out " +
            dir.sub("oracle.skw"));
    REQUIRE(r.exit_code == 0);  // exit 3 would mean the dice gate failed

    r = run("sage --seed 42 --manifest " + manifest + " --weights " + dir.sub("oracle.skw") +
            " --out " + dir.sub("maps"));
    REQUIRE(r.exit_code == 0);

    r = run("train --seed 42 --manifest " + manifest + " --mode keep_core --maps " +
            dir.sub("maps") + " --out " + dir.sub("run"));
    REQUIRE(r.exit_code == 0);

    r = run("eval --seed 42 --manifest " + manifest + " --weights " + dir.sub("run") +
            "/model.skw --split eval --out " + dir.sub("eval"));
    REQUIRE(r.exit_code == 0);

    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(elapsed < 600.0);  // one core, default toy sizes
    CHECK(fs::exists(dir.sub("run") + "/aggregate.csv"));
}

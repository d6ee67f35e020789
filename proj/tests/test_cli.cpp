#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partmim/cli.hpp"
#include "partmim/data_io.hpp"

using namespace partmim;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(std::initializer_list<std::string> args) {
    std::vector<std::string> owned{"partmim"};
    owned.insert(owned.end(), args);
    std::vector<const char*> argv;
    for (const auto& a : owned) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

// A small synthetic dataset shared by the cases below.
const fs::path& workdir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "partmim_test_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        REQUIRE(run({"synth", "--out", (d / "data").string(), "--count", "4"}) == 0);
        return d;
    }();
    return dir;
}

std::string manifest() { return (workdir() / "data" / "manifest.jsonl").string(); }
std::string path(const std::string& name) { return (workdir() / name).string(); }

}  // namespace

TEST_CASE("exit codes") {
    CHECK(run({"pretrain", "--manifest", "/nonexistent/m.jsonl", "--out", path("never")}) == 2);
    CHECK(run({"no-such-command"}) == 2);
    CHECK(run({"--help"}) == 0);
    CHECK(run({"grad-check", "--out", path("gc.json")}) == 0);
    CHECK(json::parse(read_file(path("gc.json")))["passed"] == true);
    CHECK(run({"grad-check", "--corrupt", "decoder.pred.weight", "--out", path("gc_bad.json")}) == 3);
    CHECK(run({"grad-check", "--set", "model.embed_dim=64"}) == 2);
    CHECK(run({"grad-check", "--set", "model.nonsense=1"}) == 2);
}

TEST_CASE("mask-plan") {
    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--out", path("p1.jsonl")}) == 0);
    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--out", path("p2.jsonl")}) == 0);
    CHECK(read_file(path("p1.jsonl")) == read_file(path("p2.jsonl")));
    const auto plans = read_mask_plans(path("p1.jsonl"));
    CHECK(plans.size() == 8);

    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--set", "beta=0.75", "--out", path("p3.jsonl")}) == 0);
    for (const auto& p : read_mask_plans(path("p3.jsonl"))) CHECK(p.plan.masked.size() == 24);

    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--set", "strategy=random", "--out", path("p4.jsonl")}) ==
            0);
    for (const auto& p : read_mask_plans(path("p4.jsonl")))
        for (const auto& tag : p.plan.provenance) CHECK(tag.tag() == "fill");

    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--seed", "1", "--out", path("p5.jsonl")}) == 0);
    CHECK(read_file(path("p1.jsonl")) != read_file(path("p5.jsonl")));
}

TEST_CASE("visualize") {
    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--out", path("vis.jsonl")}) == 0);
    REQUIRE(run({"visualize", "--manifest", manifest(), "--plans", path("vis.jsonl"), "--out", path("vis")}) == 0);
    const ImageBuffer img = load_image(workdir() / "vis" / "synth_0_a.ppm");
    CHECK(img.width == 3 * 32 + 2);
    CHECK(img.height == 64);
    write_file(workdir() / "empty.jsonl", "");
    CHECK(run({"visualize", "--manifest", manifest(), "--plans", path("empty.jsonl"), "--out", path("vis2")}) == 2);
}

TEST_CASE("stats") {
    REQUIRE(run({"mask-plan", "--manifest", manifest(), "--out", path("s.jsonl")}) == 0);
    REQUIRE(run({"stats", "--manifest", manifest(), "--plans", path("s.jsonl"), "--plans", path("s.jsonl"), "--out",
                 path("s.json")}) == 0);
    const json s = json::parse(read_file(path("s.json")));
    CHECK(s["delta"]["part_coverage"].get<double>() == 0.0);
    CHECK(s["delta"]["masked_in_part"].get<double>() == 0.0);
    REQUIRE(run({"stats", "--manifest", manifest(), "--out", path("default.json")}) == 0);
    CHECK(json::parse(read_file(path("default.json")))["reports"].size() == 3);
    CHECK(run({"stats", "--manifest", manifest(), "--plans", path("empty_stats.jsonl")}) == 2);
}

TEST_CASE("attn-map") {
    REQUIRE(run({"attn-map", "--manifest", manifest(), "--query", "5", "--out", path("attn")}) == 0);
    const json a = json::parse(read_file(path("attn.json")));
    CHECK(std::abs(a["row_sum"].get<double>() - 1.0) < 1e-12);
    CHECK(a["query"] == 5);
    const ImageBuffer heat = load_image(path("attn.ppm"));
    CHECK(heat.width == 32);
    CHECK(run({"attn-map", "--manifest", manifest(), "--query", "32"}) == 2);
    CHECK(run({"attn-map", "--manifest", manifest(), "--query", "1", "--sample", "nobody"}) == 2);
}

TEST_CASE("pretrain writes a checkpoint and metrics") {
    REQUIRE(run({"pretrain", "--manifest", manifest(), "--quiet", "--set", "train.max_steps=2", "--set",
                 "train.batch_size=2", "--set", "train.log_wall_time=false", "--out", path("run")}) == 0);
    CHECK(fs::exists(workdir() / "run" / "final.pmim"));
    const auto log = read_file(workdir() / "run" / "metrics.jsonl");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
}

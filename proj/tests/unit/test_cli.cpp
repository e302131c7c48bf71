#include <fstream>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "regmae/cli.hpp"
#include "../common/support.hpp"

using namespace regmae;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("exit codes") {
    testing::TempDir dir;
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
    CHECK(invoke({"--help"}).code == 0);

    const auto unknown = invoke({"synth", "--out-dir", dir.path().string(), "--set", "synth.nope=1"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("synth.nope") != std::string::npos);

    // Missing input file: a config error naming the key.
    const auto missing = invoke({"preprocess", "--out-dir", dir.path().string(), "--set",
                                 "data.root=" + (dir / "nowhere").string()});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("data.") != std::string::npos);

    // Present but corrupt input: a runtime failure.
    std::ofstream(dir / "bad.csv") << "run,condition,auroc\ns0,A,notanumber\n";
    const auto corrupt = invoke({"stats", "--out-dir", (dir / "s").string(), "--set",
                                 "stats.input=" + (dir / "bad.csv").string()});
    CHECK(corrupt.code != 0);
  }

  TEST_CASE("synth writes the dataset and the resolved config") {
    testing::TempDir dir;
    const auto r = invoke({"synth", "--subjects", "4", "--shape", "24", "--frames", "4", "--seed", "9", "--out-dir",
                           dir.path().string()});
    REQUIRE(r.code == 0);
    for (const char* f : {"manifest.csv", "atlas.nii.gz", "region_map.csv", "template_mask.nii.gz",
                          "resolved_config.json", "input_manifest.json"})
      CHECK(std::filesystem::exists(dir / f));
    std::ifstream in(dir / "resolved_config.json");
    const auto cfg = nlohmann::json::parse(in);
    CHECK(cfg["seed"] == 9);
    CHECK(cfg["synth"]["shape"] == 24);
    CHECK(cfg["synth"]["subjects"] == 4);
  }

  TEST_CASE("stats subcommand on a paired table") {
    testing::TempDir dir;
    {
      std::ofstream out(dir / "runs.csv");
      out << "run,condition,auroc\n";
      for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 3; ++c) out << "s" << r << ",C" << c << "," << 0.5 + 0.1 * c + 0.01 * r << "\n";
    }
    const auto r = invoke({"stats", "--out-dir", dir.path().string(), "--set",
                           "stats.input=" + (dir / "runs.csv").string()});
    REQUIRE(r.code == 0);
    CHECK(std::filesystem::exists(dir / "stats_report.json"));
    CHECK(r.out.find("Friedman") != std::string::npos);
  }
}

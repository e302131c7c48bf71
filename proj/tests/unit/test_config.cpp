#include <cstdlib>
#include <fstream>

#include <doctest.h>

#include "regmae/run_config.hpp"
#include "../common/support.hpp"

using namespace regmae;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults carry every module section") {
    const auto d = config::defaults();
    for (const char* k : {"seed", "data", "synth", "preprocess", "atlas", "mask", "model", "pretrain", "finetune",
                          "attribution", "stats"})
      CHECK(d.contains(k));
    CHECK(config::unknown_keys(d, d).empty());
  }

  TEST_CASE("dotted overrides parse as JSON, else as strings") {
    const auto cfg = config::resolve({}, {"pretrain.lr=0.01", "mask.region=limbic", "model.stage_depths=[2,2]"});
    CHECK(cfg["pretrain"]["lr"] == 0.01);
    CHECK(cfg["mask"]["region"] == "limbic");
    CHECK(cfg["model"]["stage_depths"] == nlohmann::json::array({2, 2}));
    CHECK(kind_of([] { config::resolve({}, {"pretrain.lrr=1"}); }) == ErrorKind::Config);
    CHECK(kind_of([] { config::resolve({}, {"noequals"}); }) == ErrorKind::Config);
    CHECK(kind_of([] { config::resolve({}, {"pretrain..lr=1"}); }) == ErrorKind::Config);
  }

  TEST_CASE("config file: unknown keys are named, invalid JSON rejected") {
    testing::TempDir dir;
    std::ofstream(dir / "ok.json") << R"({"seed": 5, "finetune": {"epochs": 2}})";
    const auto cfg = config::resolve(dir / "ok.json", {"seed=6"});
    CHECK(cfg["seed"] == 6);
    CHECK(cfg["finetune"]["epochs"] == 2);
    CHECK(cfg["finetune"]["lr"] == config::defaults()["finetune"]["lr"]);

    std::ofstream(dir / "bad.json") << R"({"finetune": {"epochz": 2}})";
    try {
      config::resolve(dir / "bad.json", {});
      FAIL("expected config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      CHECK(std::string(e.what()).find("finetune.epochz") != std::string::npos);
    }
    std::ofstream(dir / "broken.json") << "{ nope";
    CHECK(kind_of([&] { config::resolve(dir / "broken.json", {}); }) == ErrorKind::Config);
    CHECK(kind_of([&] { config::resolve(dir / "missing.json", {}); }) == ErrorKind::Config);
  }

  TEST_CASE("data paths resolve against root, then the environment") {
    auto cfg = config::defaults();
    ::unsetenv(config::kDataRootEnv);
    CHECK(config::data_path(cfg, "manifest") == "manifest.csv");
    ::setenv(config::kDataRootEnv, "/env/root", 1);
    CHECK(config::data_path(cfg, "manifest") == "/env/root/manifest.csv");
    cfg["data"]["root"] = "/cfg/root";
    CHECK(config::data_path(cfg, "manifest") == "/cfg/root/manifest.csv");
    cfg["data"]["manifest"] = "/abs/m.csv";
    CHECK(config::data_path(cfg, "manifest") == "/abs/m.csv");
    CHECK(config::data_path(cfg, "checkpoint").empty());
    ::unsetenv(config::kDataRootEnv);
  }
}

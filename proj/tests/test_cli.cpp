#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "mmrl/cli.hpp"
#include "mmrl/config.hpp"
#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"
#include "support.hpp"

using namespace mmrl;
using mmrl::testing::TempDir;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

// Small backbone flags so whole workflows finish in seconds.
const std::vector<std::string> kToyFlags = {
    "--classes", "4",     "--items-per-class", "24", "--image-size",  "16", "--patch-size",     "8",
    "--layers",  "4",     "--vision-width",    "16", "--text-width",  "12", "--embed-dim",      "8",
    "--heads",   "2",     "--vocab-size",      "32", "--temperature", "0.05", "--pretrain-steps", "20",
    "--dr",      "16",    "--shots",           "4",  "--epochs",      "2"};

Run run(const TempDir& dir, const std::string& command, std::vector<std::string> extra = {}, bool toy = true) {
  std::vector<std::string> args{"mmrl", command};
  if (toy) args.insert(args.end(), kToyFlags.begin(), kToyFlags.end());
  for (const char* key : {"manifest", "checkpoint", "bundle", "loss_csv", "results", "log"}) {
    args.push_back("--" + std::string(key));
    args.push_back((dir / key).string());
  }
  args.insert(args.end(), extra.begin(), extra.end());
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Value of `key` in the resolved config echoed to stderr.
std::string resolved(const std::string& err, const std::string& key) {
  std::istringstream in(err);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  }
  return "<absent>";
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config resolution: defaults < file < MMRL_SEED < flags") {
    TempDir dir("cli_config");
    write_file_atomic(dir / "run.cfg", "# comment\nseed = 11\nalpha=0.4\n\nK=3\n");
    ::unsetenv("MMRL_SEED");

    Run r = run(dir, "report", {}, false);
    CHECK(resolved(r.err, "seed") == "1");
    CHECK(resolved(r.err, "J") == "4");

    r = run(dir, "report", {"--config", (dir / "run.cfg").string()}, false);
    CHECK(resolved(r.err, "seed") == "11");
    CHECK(resolved(r.err, "alpha") == "0.4");

    ::setenv("MMRL_SEED", "12", 1);
    r = run(dir, "report", {"--config", (dir / "run.cfg").string()}, false);
    CHECK(resolved(r.err, "seed") == "12");
    r = run(dir, "report", {"--config", (dir / "run.cfg").string(), "--seed", "13", "--K", "2"}, false);
    CHECK(resolved(r.err, "seed") == "13");
    CHECK(resolved(r.err, "K") == "2");
    CHECK(resolved(r.err, "alpha") == "0.4");
    ::unsetenv("MMRL_SEED");

    // The config is echoed exactly once.
    std::size_t count = 0;
    for (auto pos = r.err.find("# resolved config"); pos != std::string::npos;
         pos = r.err.find("# resolved config", pos + 1)) {
      ++count;
    }
    CHECK(count == 1);
  }

  TEST_CASE("config hash ignores paths and symbolic defaults") {
    RunConfig a;
    a.resolve();
    RunConfig b;
    b.set("J", "4");
    b.set("results", "/elsewhere/r.json");
    b.resolve();
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    b.set("alpha", "0.6");
    CHECK(a.hash() != b.hash());
    CHECK_THROWS_AS(a.set("nonsense", "1"), ConfigError);
  }

  TEST_CASE("bad config values and unknown keys") {
    TempDir dir("cli_bad");
    write_file_atomic(dir / "bad.cfg", "colour=blue\n");
    CHECK(run(dir, "report", {"--config", (dir / "bad.cfg").string()}).code == 2);
    CHECK(run(dir, "train", {"--alpha", "1.5"}).code == 2);
    CHECK(run(dir, "train", {"--K", "many"}).code == 2);
    CHECK(run(dir, "train", {"--J", "9"}).code == 2);
    write_file_atomic(dir / "broken.cfg", "just words\n");
    CHECK(run(dir, "report", {"--config", (dir / "broken.cfg").string()}).code == 2);
  }

  TEST_CASE("usage errors exit 2") {
    TempDir dir("cli_usage");
    CHECK(run(dir, "train", {"--bogus", "1"}).code == 2);
    std::vector<const char*> none{"mmrl"};
    std::ostringstream out, err;
    CHECK(run_cli(1, none.data(), out, err) == 2);
    std::vector<const char*> unknown{"mmrl", "fly"};
    CHECK(run_cli(2, unknown.data(), out, err) == 2);
  }

  TEST_CASE("eval without a trained bundle exits 3") {
    TempDir dir("cli_missing");
    const Run r = run(dir, "eval");
    CHECK(r.code == 3);
    CHECK(r.err.find("missing adapter bundle") != std::string::npos);
    CHECK(run(dir, "pretrain").code == 3);
  }

  TEST_CASE("gradcheck on the default config exits 0") {
    TempDir dir("cli_gradcheck");
    const Run r = run(dir, "gradcheck", {}, false);
    CHECK(r.code == 0);
    const auto pos = r.out.rfind("max_rel_err=");
    REQUIRE(pos != std::string::npos);
    CHECK(std::stod(r.out.substr(pos + 12)) < 1e-4);
  }

  TEST_CASE("workflow: gen, pretrain, train, eval, ablate, report") {
    TempDir dir("cli_flow");
    REQUIRE(run(dir, "gen").code == 0);
    REQUIRE(run(dir, "pretrain").code == 0);
    // Reference hyperparameters, with J = L/2 for this depth.
    Run r = run(dir, "train", {"--alpha", "0.7", "--lambda", "0.5", "--K", "5", "--J", "2", "--dr", "512"});
    REQUIRE(r.code == 0);
    const std::string csv = read_file(dir / "loss_csv");
    CHECK(csv.rfind("# config_hash=", 0) == 0);
    CHECK(csv.find("step,epoch,L_total,L_ce_c,L_ce_r,L_cos_v,L_cos_t\n") != std::string::npos);

    r = run(dir, "eval", {"--alpha", "0.7", "--lambda", "0.5", "--K", "5", "--J", "2", "--dr", "512"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("Base") != std::string::npos);
    const auto records = records_from_json(read_file(dir / "results"));
    REQUIRE(records.size() == 1);
    CHECK(records[0].config_hash.size() == 16);
    CHECK(csv.find(records[0].config_hash) != std::string::npos);
    CHECK(read_file(dir / "results.csv").find(records[0].config_hash) != std::string::npos);

    r = run(dir, "ablate", {"--grid", "alpha", "--grid-values", "0.3,1", "--seeds", "1", "--epochs", "1"});
    REQUIRE(r.code == 0);
    CHECK(records_from_json(read_file(dir / "results")).size() == 2);

    r = run(dir, "report", {"--report", (dir / "table.csv").string()});
    CHECK(r.code == 0);
    CHECK(read_file(dir / "table.csv").rfind("variant,base_acc", 0) == 0);

    const std::string log = read_file(dir / "log");
    CHECK(log.find("train config_hash=") != std::string::npos);
    CHECK(log.find("exit=0") != std::string::npos);
  }
}

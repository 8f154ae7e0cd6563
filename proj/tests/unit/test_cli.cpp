#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "condflow/errors.hpp"
#include "condflow_cli/checkpoint.hpp"
#include "condflow_cli/commands.hpp"
#include "condflow_cli/config.hpp"
#include "condflow_cli/script.hpp"
#include "doctest.h"
#include "test_models.hpp"

namespace fs = std::filesystem;
using namespace condflow;
using namespace condflow::cli;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "condflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("condflow_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

// Tiny world and short training so every command runs in well under a second.
std::string small_config(const fs::path& dir) {
  return "[world]\nseed = 4\nlatent_dim = 6\nattr_dim = 3\n"
         "[data]\nsize = 120\n"
         "[train]\nepochs = 1\nbatch_size = 20\nthreads = 2\nmax_iterations = 3\n"
         "[eval]\nstarts = 3\ndiffvec_starts = 3\npath_samples = 4\n"
         "[output]\ndir = " + dir.string() + "\n";
}

fs::path prepared(const std::string& name) {
  const fs::path dir = scratch(name);
  spit(dir / "run.ini", small_config(dir));
  REQUIRE(invoke({"-c", (dir / "run.ini").string(), "gen-data"}).code == 0);
  REQUIRE(invoke({"-c", (dir / "run.ini").string(), "train"}).code == 0);
  return dir;
}

}  // namespace

TEST_CASE("config defaults follow the reference training setup") {
  const RunConfig c;
  CHECK(c.epochs == 10);
  CHECK(c.batch_size == 5);
  CHECK(c.lr == 1e-3);
  CHECK(c.solver.rtol == 1e-5);
  CHECK(c.solver.atol == 1e-5);
  CHECK(c.data_size == 10000);
  CHECK(c.truncation == 0.7);
  CHECK(c.latent_dim == 512);
  CHECK(c.attr_dim == 17);
}

TEST_CASE("config text round trips") {
  RunConfig c;
  c.lr = 0.1 + 0.2;
  c.channels = {"yaw", "light_0"};
  c.identity_threshold = 0.25;
  c.solver.trace_mode = TraceMode::exact;
  const std::string text = c.to_text();
  const RunConfig back = parse_config(text);
  CHECK(back.to_text() == text);
  CHECK(back.lr == c.lr);
  CHECK(back.channels == c.channels);
}

TEST_CASE("config rejects unknown keys and malformed lines") {
  CHECK_THROWS_WITH_AS(parse_config("[train]\nepoch = 3\n"), doctest::Contains("unknown key 'epoch'"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[train]\nepochs = 3\n[bogus]\n"), doctest::Contains("line 3"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = 3\nepochs = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nlr = -1\n"), ConfigError);
  CHECK(parse_config("# comment\n[train]\nepochs = 3  # trailing\n").epochs == 3);
}

TEST_CASE("output directory override comes from the environment") {
  RunConfig c;
  c.output_dir = "configured";
  ::unsetenv(kOutputDirEnv);
  CHECK(resolve_output(c, "x.ckpt") == fs::path("configured") / "x.ckpt");
  ::setenv(kOutputDirEnv, "/tmp/elsewhere", 1);
  CHECK(resolve_output(c, "x.ckpt") == fs::path("/tmp/elsewhere") / "x.ckpt");
  CHECK(resolve_output(c, "/abs/x.ckpt") == fs::path("/abs/x.ckpt"));
  ::unsetenv(kOutputDirEnv);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint c;
  c.world_seed = 9;
  c.world_fingerprint = 0x0123456789abcdefULL;
  c.world_attr_dim = 5;
  c.model = testing_support::random_model(4, 2, 3, 17);
  c.model.channels = {1, 4};
  c.model.tanh_on_last = false;
  c.world_std = {0.1, 0.2, 0.3, 0.4, 0.5};
  c.config_echo = "[train]\nepochs = 1\n";
  c.loss_curve = {1.5, 1.25};
  const auto bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.model.parameters() == c.model.parameters());
  CHECK(back.model.channels == c.model.channels);
  CHECK_FALSE(back.model.tanh_on_last);
  CHECK(back.config_echo == c.config_echo);

  SUBCASE("any flipped byte is detected") {
    for (std::size_t i = 0; i < bytes.size(); i += 7) {
      auto bad = bytes;
      bad[i] ^= 0x40;
      CHECK_THROWS_AS(decode_checkpoint(bad), IntegrityError);
    }
  }
  SUBCASE("truncation is detected") {
    for (std::size_t n : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
      CHECK_THROWS_AS(decode_checkpoint(std::span(bytes.data(), n)), IntegrityError);
    }
  }
}

TEST_CASE("edit script grammar") {
  const auto steps = parse_edit_script(
      "# pose first\n"
      "yaw = +0.3\n"
      "light = -0.1, 0.2 fast; expression = 0.7 accurate\n"
      "\n"
      "pitch = abs:-0.5\n");
  REQUIRE(steps.size() == 4);
  CHECK(steps[0].edit == "yaw");
  CHECK(steps[0].kind == ValueKind::delta);
  CHECK(steps[0].values == std::vector<double>{0.3});
  CHECK(steps[0].mode == EditMode::accurate);
  CHECK(steps[0].line == 2);
  CHECK(steps[1].values == std::vector<double>{-0.1, 0.2});
  CHECK(steps[1].kind == ValueKind::delta);
  CHECK(steps[1].mode == EditMode::fast);
  CHECK(steps[2].line == 3);
  CHECK(steps[2].kind == ValueKind::absolute);
  CHECK(steps[3].kind == ValueKind::absolute);
  CHECK(steps[3].values == std::vector<double>{-0.5});
  CHECK(parse_edit_script("").empty());
  CHECK(parse_edit_script("# only comments\n\n").empty());

  CHECK_THROWS_WITH_AS(parse_edit_script("yaw = 0.1\nyaw 0.2\n"), doctest::Contains("line 2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_edit_script("yaw = 0.1 quick\n"), doctest::Contains("line 1"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("yaw = \n"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("= 0.3\n"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("yaw = 0.3x\n"), ConfigError);
}

TEST_CASE("latent file round trip") {
  const fs::path dir = scratch("latents");
  std::vector<ExtendedLatent> ls;
  ls.push_back(ExtendedLatent::broadcast(Vector{0.1, -2.5, 1e-300}, 2));
  ls.push_back(ExtendedLatent::broadcast(Vector{1.0 / 3.0, 4.0, -0.0}, 2));
  spit(dir / "l.txt", format_latents(ls));
  const auto back = read_latents(dir / "l.txt");
  REQUIRE(back.size() == 2);
  CHECK(back[0] == ls[0]);
  CHECK(back[1] == ls[1]);
  spit(dir / "bad.txt", "latents 2 2 3\n1 2 3\n");
  CHECK_THROWS_AS(read_latents(dir / "bad.txt"), IntegrityError);
}

TEST_CASE("gen-data is deterministic and validates its size") {
  const fs::path dir = scratch("gen");
  spit(dir / "run.ini", small_config(dir));
  const std::string cfg = (dir / "run.ini").string();
  CHECK(invoke({"-c", cfg, "gen-data", "-o", (dir / "a.cfds").string()}).code == 0);
  CHECK(invoke({"-c", cfg, "gen-data", "-o", (dir / "b.cfds").string()}).code == 0);
  CHECK(slurp(dir / "a.cfds") == slurp(dir / "b.cfds"));
  const Run zero = invoke({"-c", cfg, "gen-data", "-n", "0", "-o", (dir / "c.cfds").string()});
  CHECK(zero.code == 1);
}

TEST_CASE("train is deterministic and inspect reports it") {
  const fs::path dir = prepared("train");
  const std::string cfg = (dir / "run.ini").string();
  CHECK(invoke({"-c", cfg, "train", "-o", (dir / "again.ckpt").string()}).code == 0);
  CHECK(slurp(dir / "model.ckpt") == slurp(dir / "again.ckpt"));
  const Run ins = invoke({"inspect", (dir / "model.ckpt").string()});
  CHECK(ins.code == 0);
  CHECK(ins.out.find("parameters: 409\n") != std::string::npos);
  CHECK(ins.out.find("loss curve:") != std::string::npos);
}

TEST_CASE("corrupt checkpoints exit with status 2") {
  const fs::path dir = prepared("corrupt");
  std::string bytes = slurp(dir / "model.ckpt");
  spit(dir / "trunc.ckpt", bytes.substr(0, bytes.size() / 2));
  bytes[bytes.size() / 3] ^= 0x01;
  spit(dir / "flip.ckpt", bytes);
  CHECK(invoke({"inspect", (dir / "trunc.ckpt").string()}).code == 2);
  const Run flip = invoke({"inspect", (dir / "flip.ckpt").string()});
  CHECK(flip.code == 2);
  CHECK(flip.err.find("integrity") != std::string::npos);
  CHECK(invoke({"inspect", (dir / "missing.ckpt").string()}).code == 1);
}

TEST_CASE("train refuses a dataset from another world") {
  const fs::path dir = prepared("mismatch");
  spit(dir / "other.ini", "[world]\nseed = 5\nlatent_dim = 6\nattr_dim = 3\n");
  const Run r = invoke({"-c", (dir / "other.ini").string(), "train", "-d", (dir / "dataset.cfds").string(), "-o",
                     (dir / "x.ckpt").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("refusing to train") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "x.ckpt"));
}

TEST_CASE("init-only reports reference parameter counts") {
  const fs::path dir = scratch("init");
  const Run r = invoke({"train", "--init-only", "--blocks", "2", "-o", (dir / "m.ckpt").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("parameters: 565249\n") != std::string::npos);
  CHECK(invoke({"inspect", (dir / "m.ckpt").string()}).out.find("parameters: 565249\n") != std::string::npos);
}

TEST_CASE("sample validates channels and is seeded") {
  const fs::path dir = prepared("sample");
  const std::string cfg = (dir / "run.ini").string();
  const std::string ckpt = (dir / "model.ckpt").string();
  const Run bad = invoke({"-c", cfg, "sample", ckpt, "--set", "smirk=1"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("smirk") != std::string::npos);
  CHECK(invoke({"-c", cfg, "sample", ckpt, "-n", "1", "--seed", "7", "-o", (dir / "a.txt").string()}).code == 0);
  CHECK(invoke({"-c", cfg, "sample", ckpt, "-n", "1", "--seed", "7", "-o", (dir / "b.txt").string()}).code == 0);
  CHECK(slurp(dir / "a.txt") == slurp(dir / "b.txt"));
  const Run s = invoke({"-c", cfg, "sample", ckpt, "-n", "5", "--set", "yaw=0.6", "-o", (dir / "c.txt").string()});
  CHECK(s.code == 0);
  CHECK(s.out.find("yaw 0.6 ") != std::string::npos);
  CHECK(read_latents(dir / "c.txt").size() == 5);
}

TEST_CASE("edit command") {
  const fs::path dir = prepared("edit");
  const std::string cfg = (dir / "run.ini").string();
  const std::string ckpt = (dir / "model.ckpt").string();
  REQUIRE(invoke({"-c", cfg, "sample", ckpt, "-n", "2", "-o", (dir / "in.txt").string()}).code == 0);
  const std::string in = (dir / "in.txt").string();

  SUBCASE("empty script leaves the input unchanged") {
    spit(dir / "empty.txt", "# nothing\n");
    CHECK(invoke({"-c", cfg, "edit", ckpt, in, (dir / "empty.txt").string(), "-o", (dir / "out.txt").string()}).code == 0);
    CHECK(slurp(dir / "out.txt") == slurp(dir / "in.txt"));
  }
  SUBCASE("malformed and unknown lines are reported with their line") {
    spit(dir / "bad.txt", "yaw = +0.1\nyaw +0.1\n");
    const Run r = invoke({"-c", cfg, "edit", ckpt, in, (dir / "bad.txt").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("line 2") != std::string::npos);
    spit(dir / "unknown.txt", "yaw = +0.1\n\nsmile = 0.3\n");
    const Run u = invoke({"-c", cfg, "edit", ckpt, in, (dir / "unknown.txt").string()});
    CHECK(u.code == 1);
    CHECK(u.err.find("line 3") != std::string::npos);
    CHECK(u.err.find("smile") != std::string::npos);
  }
  SUBCASE("variant flag only changes subset selection") {
    spit(dir / "s.txt", "yaw = +0.1; light = -0.1\n");
    const Run v2 = invoke({"-c", cfg, "edit", ckpt, in, (dir / "s.txt").string(), "-o", (dir / "v2.txt").string()});
    const Run v1 = invoke({"-c", cfg, "edit", ckpt, in, (dir / "s.txt").string(), "--variant", "v1", "-o",
                        (dir / "v1.txt").string()});
    CHECK(v2.code == 0);
    CHECK(v1.code == 0);
    CHECK(v2.out.find("yaw accurate V2 rows_changed=4/18") != std::string::npos);
    CHECK(v2.out.find("light accurate V2 rows_changed=5/18") != std::string::npos);
    CHECK(v1.out.find("yaw accurate V1 rows_changed=18/18") != std::string::npos);
    CHECK(invoke({"-c", cfg, "edit", ckpt, in, (dir / "s.txt").string(), "--variant", "v3"}).code == 1);
  }
}

TEST_CASE("eval reproduces its report and rejects unknown suites") {
  const fs::path dir = prepared("eval");
  const std::string cfg = (dir / "run.ini").string();
  const std::string ckpt = (dir / "model.ckpt").string();
  CHECK(invoke({"-c", cfg, "eval", ckpt, "-o", (dir / "a.txt").string(), "--json", (dir / "a.json").string()}).code == 0);
  CHECK(invoke({"-c", cfg, "eval", ckpt, "-o", (dir / "b.txt").string(), "--json", (dir / "b.json").string()}).code == 0);
  CHECK(slurp(dir / "a.txt") == slurp(dir / "b.txt"));
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  CHECK(slurp(dir / "a.txt").find("identity.cosine=") != std::string::npos);
  CHECK(invoke({"-c", cfg, "eval", ckpt, "--suite", "beauty"}).code == 1);
}

TEST_CASE("usage errors exit with status 1") {
  CHECK(invoke({}).code == 1);
  CHECK(invoke({"frobnicate"}).code == 1);
  CHECK(invoke({"--help"}).code == 0);
  CHECK(invoke({"-c", "/nonexistent/run.ini", "inspect", "x"}).code == 1);
}

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <doctest.h>
#include <json.hpp>

#include "casp/model_store.hpp"
#include "test_util.hpp"

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run run(const std::string& args) {
  const std::string cmd = std::string(CASP_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Workspace {
  std::filesystem::path dir;
  std::string model, calib;
};

const Workspace& workspace() {
  static const Workspace w = [] {
    Workspace out;
    out.dir = casp::testing::scratch_dir("cli");
    out.model = (out.dir / "m.caspkpt").string();
    out.calib = (out.dir / "c.casptok").string();
    const Run init = run("init --out " + out.model + " --layers 2 --train-steps 20 --train-count 32 --seed 1");
    REQUIRE_MESSAGE(init.code == 0, init.output);
    const Run gen = run("gen-calib --out " + out.calib + " --count 8 --vision-ratio 0.25 --seed 4");
    REQUIRE_MESSAGE(gen.code == 0, gen.output);
    return out;
  }();
  return w;
}

}  // namespace

TEST_CASE("init and gen-calib write loadable files") {
  const auto& w = workspace();
  const auto model = casp::load_checkpoint(w.model);
  CHECK(model.config.n_layers == 2);
  const auto calib = casp::load_calibration(w.calib);
  CHECK(calib.sequences.size() == 8);
}

TEST_CASE("compress requires a seed") {
  const auto& w = workspace();
  const Run r = run("compress --model " + w.model + " --calib " + w.calib + " --out " + (w.dir / "x.caspkpt").string());
  CHECK(r.code != 0);
  CHECK(r.output.find("--seed") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(w.dir / "x.caspkpt"));
}

TEST_CASE("compress writes a checkpoint and a line-delimited report") {
  const auto& w = workspace();
  const auto out = w.dir / "c1.caspkpt";
  const auto report = w.dir / "c1.jsonl";
  const Run r = run("compress --model " + w.model + " --calib " + w.calib + " --out " + out.string() +
                    " --seed 7 --report " + report.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const auto model = casp::load_checkpoint(out);
  CHECK(std::holds_alternative<casp::LowRankWeight>(model.layers[0].w_q));
  std::istringstream lines(slurp(report));
  std::string line;
  int layers = 0;
  std::getline(lines, line);
  const auto summary = nlohmann::json::parse(line);
  CHECK(summary["record"] == "summary");
  CHECK(summary["seed"] == 7);
  CHECK(summary["model_size_bytes"].get<std::uintmax_t>() == std::filesystem::file_size(out));
  while (std::getline(lines, line)) {
    CHECK(nlohmann::json::parse(line)["record"] == "layer");
    ++layers;
  }
  CHECK(layers == 2);
}

TEST_CASE("stage failures exit nonzero with a tagged message") {
  const auto& w = workspace();
  const Run r = run("compress --model " + w.model + " --calib " + w.calib + " --out " +
                    (w.dir / "bad.caspkpt").string() + " --seed 1 --rank-keep 0.01");
  CHECK(r.code == 2);
  CHECK(r.output.find("error: [lowrank]") != std::string::npos);
  const Run infeasible = run("compress --model " + w.model + " --calib " + w.calib + " --out " +
                             (w.dir / "bad.caspkpt").string() + " --seed 1 --allowed 3,4");
  CHECK(infeasible.code == 2);
  CHECK(infeasible.output.find("error: [allocate]") != std::string::npos);
}

TEST_CASE("corrupt inputs are reported") {
  const auto& w = workspace();
  const auto bad = w.dir / "corrupt.caspkpt";
  std::string bytes = slurp(w.model);
  bytes[bytes.size() / 2] ^= 0x01;
  std::ofstream(bad, std::ios::binary) << bytes;
  const Run r = run("eval --model " + bad.string());
  CHECK(r.code != 0);
  CHECK(r.output.find("checksum") != std::string::npos);
  const Run missing = run("eval --model " + (w.dir / "none.caspkpt").string());
  CHECK(missing.code != 0);
}

TEST_CASE("unknown scheme and subcommand are usage errors") {
  const auto& w = workspace();
  CHECK(run("compress --model " + w.model + " --calib " + w.calib + " --out " + (w.dir / "y.caspkpt").string() +
            " --seed 1 --scheme fancy")
            .code != 0);
  CHECK(run("frobnicate").code != 0);
  CHECK(run("--help").code == 0);
}

TEST_CASE("lowrank, quantize, allocate, analyze, eval and sweep run") {
  const auto& w = workspace();
  const auto lr = (w.dir / "lr.caspkpt").string();
  Run r = run("lowrank --model " + w.model + " --calib " + w.calib + " --out " + lr + " --rank-keep 0.5");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(std::get<casp::LowRankWeight>(casp::load_checkpoint(lr).layers[1].w_k).rank == 8);

  const auto q = (w.dir / "q.caspkpt").string();
  r = run("quantize --model " + lr + " --out " + q + " --scheme greedy --bits 3 --calib " + w.calib);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(std::holds_alternative<casp::QuantizedTensor>(casp::load_checkpoint(q).layers[0].w_o));

  r = run("allocate --model " + lr + " --calib " + w.calib + " --avg-bits 2.5");
  REQUIRE_MESSAGE(r.code == 0, r.output);

  r = run("analyze --model " + w.model + " --compressed " + lr + " --calib " + w.calib);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("\"record\":\"attention\"") != std::string::npos);

  r = run("eval --model " + q + " --count 4");
  REQUIRE_MESSAGE(r.code == 0, r.output);

  r = run("sweep --model " + w.model + " --ratios 0,0.5 --calib-count 4 --heldout-count 4");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("spearman_ratio_e") != std::string::npos);
  CHECK(run("sweep --model " + w.model + " --ratios 0,1.5").code != 0);
}

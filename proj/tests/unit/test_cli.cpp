#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "nnformer/checkpoint.hpp"
#include "nnformer/config.hpp"

#ifndef NNFORMER_CLI_PATH
#error "NNFORMER_CLI_PATH must point at the nnformer executable"
#endif

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(NNFORMER_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string body(const std::string& out) {
  std::istringstream in(out);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) != 0) kept += line + "\n";
  }
  return kept;
}

int count_lines_with(const std::string& out, const std::string& needle) {
  std::istringstream in(out);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) n += line.find(needle) != std::string::npos ? 1 : 0;
  return n;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("nnformer_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("shapes").code == 2);
  CHECK(run("shapes --config micro --bogus 1").code == 2);
  CHECK(run("shapes --config no_such_preset").code == 2);
  CHECK(run("train --config micro --out /tmp/x --epochs 0").code == 2);
}

TEST_CASE("gradcheck suite") {
  const Run ok = run("gradcheck --seed 1");
  CHECK(ok.code == 0);
  CHECK(count_lines_with(ok.out, "\tpass") >= 10);
  CHECK(count_lines_with(ok.out, "FAIL") == 0);
  CHECK(ok.out.find("# seed = 1") != std::string::npos);
  const Run bad = run("gradcheck --seed 1 --inject-fault");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("result\tFAIL") != std::string::npos);
}

TEST_CASE("shape tables") {
  const Run syn = run("shapes --config synapse");
  CHECK(syn.code == 0);
  CHECK(syn.out.find("encoder0\tencoder\t0\t32x32x32\t192") != std::string::npos);
  CHECK(syn.out.find("# crop_size = 128,128,64") != std::string::npos);
  const Run acdc = run("shapes --config acdc");
  CHECK(acdc.code == 0);
  CHECK(acdc.out.find("encoder0\tencoder\t0\t40x40x14") != std::string::npos);
  CHECK(acdc.out.find("logits_mid\t4x40x40x14") != std::string::npos);

  // Strides that shrink an axis below one voxel.
  const auto dir = scratch("shapes");
  nnformer::ModelConfig c = nnformer::preset("micro");
  c.down_strides[2] = {4, 4, 4};
  std::ofstream(dir / "bad.cfg") << nnformer::config_to_text(c);
  CHECK(run("shapes --config " + (dir / "bad.cfg").string()).code == 2);
  std::ofstream(dir / "good.cfg") << nnformer::config_to_text(nnformer::preset("toy"));
  CHECK(run("shapes --config " + (dir / "good.cfg").string()).code == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("complexity report") {
  const Run a = run("complexity --config micro");
  CHECK(a.code == 0);
  CHECK(a.out.find("result\tpass") != std::string::npos);
  CHECK(run("complexity --config micro").out == a.out);
  const Run toy = run("complexity --config toy");
  CHECK(toy.code == 0);
  CHECK(count_lines_with(toy.out, "/skip\tskip") == 2);
}

TEST_CASE("train, eval and ensemble") {
  const auto dir = scratch("train");
  const std::string common = "train --config micro --seed 4 --epochs 2 --iters 3 --val-scans 2 --out ";
  const Run t1 = run(common + (dir / "a").string());
  const Run t2 = run(common + (dir / "b").string());
  REQUIRE(t1.code == 0);
  CHECK(body(t1.out) == body(t2.out));
  CHECK(t1.out.find("# optimizer.momentum = 0.99\n") != std::string::npos);
  CHECK(t1.out.find("# optimizer.weight_decay = 3e-05\n") != std::string::npos);
  std::ifstream la(dir / "a" / "train_log.tsv"), lb(dir / "b" / "train_log.tsv");
  std::stringstream sa, sb;
  sa << la.rdbuf();
  sb << lb.rdbuf();
  CHECK(sa.str() == sb.str());

  const std::string ckpt = (dir / "a" / "final.ckpt").string();
  const Run e = run("eval --checkpoint " + ckpt + " --seed 9 --scans 3");
  REQUIRE(e.code == 0);
  CHECK(run("eval --checkpoint " + ckpt + " --seed 9 --scans 3").out == e.out);
  const Run self = run("ensemble --ckpt-a " + ckpt + " --ckpt-b " + ckpt + " --seed 9 --scans 3");
  REQUIRE(self.code == 0);
  CHECK(body(self.out) == body(e.out));
  CHECK(body(e.out).rfind("class\tdsc\thd95\tflag\n", 0) == 0);

  // An untrained model scores near chance.
  const nnformer::net::Model<float> fresh(nnformer::preset("micro"), 1);
  nnformer::train::save_checkpoint((dir / "fresh.ckpt").string(), nnformer::train::capture(fresh, nullptr, 1, 0));
  const Run u = run("eval --checkpoint " + (dir / "fresh.ckpt").string() + " --seed 9 --scans 3");
  REQUIRE(u.code == 0);
  const auto avg = body(u.out).find("avg\t");
  REQUIRE(avg != std::string::npos);
  CHECK(std::stod(body(u.out).substr(avg + 4)) < 0.6);

  // Checkpoints from another config cannot be ensembled.
  const nnformer::net::Model<float> toy(nnformer::preset("toy"), 1);
  nnformer::train::save_checkpoint((dir / "toy.ckpt").string(), nnformer::train::capture(toy, nullptr, 1, 0));
  CHECK(run("ensemble --ckpt-a " + ckpt + " --ckpt-b " + (dir / "toy.ckpt").string()).code == 2);

  std::ofstream(dir / "junk.ckpt") << "NNF1garbage";
  CHECK(run("eval --checkpoint " + (dir / "junk.ckpt").string()).code == 3);
  CHECK(run("eval --checkpoint " + (dir / "missing.ckpt").string()).code == 3);
  CHECK(run("ensemble --ckpt-a " + ckpt + " --ckpt-b " + (dir / "junk.ckpt").string()).code == 3);
  std::filesystem::remove_all(dir);
}

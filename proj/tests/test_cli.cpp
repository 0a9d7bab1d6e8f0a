// End-to-end tests of the command-line surface: flags, exit codes, files.

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "lrn/dataio.hpp"
#include "lrn/metrics.hpp"
#include "test_util.hpp"

using namespace lrn;
using namespace lrn::test;

namespace {

struct CmdResult {
  int code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(LRN_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult res;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe))
    res.output.append(buf, n);
  const int status = pclose(pipe);
  res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Small-but-trainable settings shared by the CLI tests.
const char* kTinyFlags =
    "--num-classes 3 --input-size 32 --encoder-channels 2,2,2,2,2 "
    "--convs-per-stage 1 --batch-size 2 --max-iters 10 --log-every 2 "
    "--checkpoint-every 0";

}  // namespace

TEST_CASE("gen-data writes the documented layout deterministically") {
  TempDir dir("cli_gen");
  const std::string out = (dir.path / "data").string();
  const CmdResult r =
      run_cli("gen-data --out " + out + " --count 4 --size 32 --classes 3");
  CHECK(r.code == 0);
  for (int i = 0; i < 4; ++i) {
    char ppm[16], pgm[16];
    std::snprintf(ppm, sizeof ppm, "%05d.ppm", i);
    std::snprintf(pgm, sizeof pgm, "%05d.pgm", i);
    CHECK(std::filesystem::exists(dir.path / "data" / "images" / ppm));
    CHECK(std::filesystem::exists(dir.path / "data" / "labels" / pgm));
  }
  const DatasetManifest m = read_manifest(dir.path / "data");
  CHECK(m.names.size() == 4);
  CHECK(m.num_classes == 3);

  const std::string out2 = (dir.path / "data2").string();
  run_cli("gen-data --out " + out2 + " --count 4 --size 32 --classes 3");
  CHECK(slurp(dir.path / "data" / "images" / "00002.ppm") ==
        slurp(dir.path / "data2" / "images" / "00002.ppm"));
  CHECK(slurp(dir.path / "data" / "labels" / "00003.pgm") ==
        slurp(dir.path / "data2" / "labels" / "00003.pgm"));

  const CmdResult bad =
      run_cli("gen-data --out " + out + " --count 1 --size 50");
  CHECK(bad.code == 3);
}

TEST_CASE("train smoke run, determinism, and class-balance effect") {
  TempDir dir("cli_train");
  const std::string data = (dir.path / "data").string();
  REQUIRE(run_cli("gen-data --out " + data +
                  " --count 6 --size 32 --classes 3 --seed 1")
              .code == 0);

  const std::string ckpt = (dir.path / "a.ckpt").string();
  const CmdResult r1 = run_cli("train --data " + data + " --out " + ckpt +
                               " " + kTinyFlags + " --seed 4");
  CHECK(r1.code == 0);
  CHECK(std::filesystem::exists(ckpt));
  CHECK(std::filesystem::exists(ckpt + ".log"));
  CHECK(r1.output.find("iter=0 ") != std::string::npos);

  const std::string ckpt2 = (dir.path / "b.ckpt").string();
  const CmdResult r2 = run_cli("train --data " + data + " --out " + ckpt2 +
                               " " + kTinyFlags + " --seed 4");
  CHECK(r2.code == 0);
  CHECK(slurp(ckpt + ".log") == slurp(ckpt2 + ".log"));

  // balance on/off must change the logged losses on imbalanced data
  const std::string ckpt3 = (dir.path / "c.ckpt").string();
  const CmdResult r3 =
      run_cli("train --data " + data + " --out " + ckpt3 + " " + kTinyFlags +
              " --seed 4 --class-balance off");
  CHECK(r3.code == 0);
  CHECK(slurp(ckpt + ".log") != slurp(ckpt3 + ".log"));

  // config parse failure
  std::ofstream(dir.path / "bad.cfg") << "nonsense=1\n";
  const CmdResult r4 =
      run_cli("train --data " + data + " --out " + ckpt +
              " --config " + (dir.path / "bad.cfg").string());
  CHECK(r4.code == 2);

  // config file + flag precedence: flag overrides the file value
  std::ofstream(dir.path / "ok.cfg")
      << "num_classes=3\ninput_size=32\nencoder_channels=2,2,2,2,2\n"
         "convs_per_stage=1\nbatch_size=4\nmax_iters=2\nlog_every=1\n"
         "checkpoint_every=0\n";
  const CmdResult r5 =
      run_cli("train --data " + data + " --out " + ckpt2 + " --config " +
              (dir.path / "ok.cfg").string() + " --batch-size 2 --seed 9");
  CHECK(r5.code == 0);
}

TEST_CASE("train respects --threads without changing results") {
  TempDir dir("cli_threads");
  const std::string data = (dir.path / "data").string();
  REQUIRE(run_cli("gen-data --out " + data +
                  " --count 4 --size 32 --classes 3 --seed 2")
              .code == 0);
  const std::string a = (dir.path / "a.ckpt").string();
  const std::string b = (dir.path / "b.ckpt").string();
  REQUIRE(run_cli("--threads 1 train --data " + data + " --out " + a + " " +
                  kTinyFlags + " --seed 8")
              .code == 0);
  REQUIRE(run_cli("--threads 2 train --data " + data + " --out " + b + " " +
                  kTinyFlags + " --seed 8")
              .code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a + ".log") == slurp(b + ".log"));
}

TEST_CASE("eval prints reports, stagewise rows and writes csv") {
  TempDir dir("cli_eval");
  const std::string data = (dir.path / "data").string();
  REQUIRE(run_cli("gen-data --out " + data +
                  " --count 4 --size 32 --classes 3 --seed 3")
              .code == 0);
  const std::string ckpt = (dir.path / "m.ckpt").string();
  REQUIRE(run_cli("train --data " + data + " --out " + ckpt + " " +
                  kTinyFlags + " --seed 5")
              .code == 0);

  const CmdResult missing =
      run_cli("eval --data " + data + " --ckpt " + (dir.path / "no.ckpt").string());
  CHECK(missing.code == 2);

  const CmdResult plain = run_cli("eval --data " + data + " --ckpt " + ckpt);
  CHECK(plain.code == 0);
  CHECK(plain.output.find("mean IoU") != std::string::npos);

  const std::string csv = (dir.path / "report.csv").string();
  const CmdResult staged = run_cli("eval --data " + data + " --ckpt " + ckpt +
                                   " --stagewise --csv " + csv);
  CHECK(staged.code == 0);
  std::size_t rows = 0, pos = 0;
  while ((pos = staged.output.find("stage ", pos)) != std::string::npos) {
    ++rows;
    pos += 6;
  }
  CHECK(rows == 6);
  const std::string csv_text = slurp(csv);
  CHECK(csv_text.rfind("class,iou,accuracy\n", 0) == 0);
  CHECK(csv_text.find("stage_1_miou,") != std::string::npos);

  // class-count mismatch between checkpoint and dataset
  const std::string data4 = (dir.path / "data4").string();
  REQUIRE(run_cli("gen-data --out " + data4 +
                  " --count 2 --size 32 --classes 4 --seed 3")
              .code == 0);
  const CmdResult mismatch =
      run_cli("eval --data " + data4 + " --ckpt " + ckpt);
  CHECK(mismatch.code == 3);
}

TEST_CASE("predict matches the eval path on a single sample") {
  TempDir dir("cli_predict");
  const std::string data = (dir.path / "data").string();
  REQUIRE(run_cli("gen-data --out " + data +
                  " --count 2 --size 32 --classes 3 --seed 6")
              .code == 0);
  const std::string ckpt = (dir.path / "m.ckpt").string();
  REQUIRE(run_cli("train --data " + data + " --out " + ckpt + " " +
                  kTinyFlags + " --seed 6")
              .code == 0);

  const std::string image = data + "/images/00000.ppm";
  const std::string out_pgm = (dir.path / "pred.pgm").string();
  const std::string out_ppm = (dir.path / "pred.ppm").string();
  const CmdResult pr = run_cli("predict --ckpt " + ckpt + " --image " + image +
                               " --out " + out_pgm + " --color " + out_ppm);
  CHECK(pr.code == 0);

  const LabelMap pred =
      read_pgm_labels(read_file(std::filesystem::path(out_pgm)));
  CHECK(pred.h == 32);
  CHECK(pred.w == 32);
  CHECK(std::filesystem::exists(out_ppm));

  // deterministic rerun
  const std::string out2 = (dir.path / "pred2.pgm").string();
  run_cli("predict --ckpt " + ckpt + " --image " + image + " --out " + out2);
  CHECK(slurp(out_pgm) == slurp(std::filesystem::path(out2)));

  // single-sample manifest eval equals confusion of the predicted map
  const std::string single = (dir.path / "single").string();
  std::filesystem::create_directories(dir.path / "single");
  std::filesystem::create_directories(dir.path / "single" / "images");
  std::filesystem::create_directories(dir.path / "single" / "labels");
  std::filesystem::copy_file(data + "/images/00000.ppm",
                             dir.path / "single" / "images" / "00000.ppm");
  std::filesystem::copy_file(data + "/labels/00000.pgm",
                             dir.path / "single" / "labels" / "00000.pgm");
  std::ofstream(dir.path / "single" / "manifest.txt")
      << "num_classes=3\n00000\n";

  const std::string csv = (dir.path / "single.csv").string();
  REQUIRE(run_cli("eval --data " + single + " --ckpt " + ckpt + " --csv " +
                  csv)
              .code == 0);

  const LabelMap gt =
      read_pgm_labels(read_file(dir.path / "single" / "labels" / "00000.pgm"));
  ConfusionMatrix cm(3);
  accumulate(cm, pred, gt);
  const EvalReport rep = report(cm);
  char expected[64];
  std::snprintf(expected, sizeof expected, "mean_iou,%.6f", rep.mean_iou);
  CHECK(slurp(std::filesystem::path(csv)).find(expected) !=
        std::string::npos);

  // dimension mismatch: 64px image against the 32px checkpoint
  const std::string data64 = (dir.path / "data64").string();
  REQUIRE(run_cli("gen-data --out " + data64 +
                  " --count 1 --size 64 --classes 3")
              .code == 0);
  const CmdResult bad =
      run_cli("predict --ckpt " + ckpt + " --image " + data64 +
              "/images/00000.ppm --out " + out2);
  CHECK(bad.code == 3);
}

TEST_CASE("gradcheck passes, covers each op once, and detects corruption") {
  const CmdResult ok = run_cli("gradcheck --seed 1");
  CHECK(ok.code == 0);
  CHECK(ok.output.find("PASS") != std::string::npos);

  const char* ops[] = {"conv3x3",  "maxpool2x2",          "relu",
                       "batchnorm", "upsample_bilinear2x", "concat_channels",
                       "softmax_xent"};
  for (const char* op : ops) {
    std::size_t count = 0, pos = 0;
    const std::string needle = std::string("\n") + op + " ";
    std::string padded = "\n" + ok.output;
    while ((pos = padded.find(needle, pos)) != std::string::npos) {
      ++count;
      pos += needle.size();
    }
    CHECK_MESSAGE(count == 1, op);
  }

  const CmdResult bad = run_cli("gradcheck --seed 1 --perturb conv3x3");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("offending ops: conv3x3") != std::string::npos);
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("train").code == 2);           // missing required flags
  CHECK(run_cli("no-such-command").code == 2);
}

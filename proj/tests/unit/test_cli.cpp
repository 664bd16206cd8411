// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <string>

#include "cellprompt/pnm.hpp"
#include "cellprompt/prompt_selection.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(CELLPROMPT_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

const char* kTinyTrain =
    " --points 3 --max-epochs 2 --min-epochs 2 --patience 1 --gen-max-epochs 1 --gen-min-epochs 1"
    " --gen-patience 1 --pretrain-steps 1 --pretrain-samples 2 --width 16 --depth 1 --heads 2 --batch-size 4 --quiet";

// One shared dataset and checkpoint for the commands that need them.
const fs::path& trained() {
  static const fs::path dir = [] {
    const fs::path d = testing::scratch_dir("cli_shared");
    REQUIRE(run("gen-data --out " + (d / "data").string() + " --n 10 --seed 3").code == 0);
    REQUIRE(run("train --data " + (d / "data").string() + " --out " + (d / "run").string() + kTinyTrain).code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-data splits, writes one manifest and is byte reproducible") {
  const fs::path d = testing::scratch_dir("cli_gen");
  const Run r = run("gen-data --out " + (d / "a").string() + " --n 200 --seed 7");
  REQUIRE(r.code == 0);
  CHECK(count_files(d / "a" / "train" / "images") == 160);
  CHECK(count_files(d / "a" / "val" / "masks") == 20);
  CHECK(count_files(d / "a" / "test" / "images") == 20);
  CHECK(fs::exists(d / "a" / "manifest.json"));
  REQUIRE(run("gen-data --out " + (d / "b").string() + " --n 200 --seed 7").code == 0);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(d / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    const fs::path rel = fs::relative(e.path(), d / "a");
    INFO(rel.string());
    CHECK(slurp(e.path()) == slurp(d / "b" / rel));
    ++compared;
  }
  CHECK(compared == 2 * 200 + 1);
}

TEST_CASE("exit codes") {
  const fs::path d = testing::scratch_dir("cli_codes");
  const Run zero = run("gen-data --out " + d.string() + "/x --n 0");
  CHECK(zero.code == 2);
  CHECK(zero.output.find("--n") != std::string::npos);
  CHECK(run("gen-data").code == 2);
  CHECK(run("no-such-command").code == 2);
  CHECK(run("train --data " + (d / "missing").string() + " --out " + (d / "o").string()).code == 2);
  CHECK(run("train --data " + (trained() / "data").string() + " --out " + (d / "o").string() + " --mode lora").code == 2);
  const Run nan = run("train --data " + (trained() / "data").string() + " --out " + (d / "nan").string() + kTinyTrain +
                      " --lr 1e300");
  CHECK(nan.code == 3);
  CHECK(run("evaluate --ckpt " + (d / "none.sack").string() + " --data " + (trained() / "data").string() + " --out " +
            (d / "e").string())
            .code == 2);
}

TEST_CASE("train writes checkpoint, logs, audit and manifest") {
  const fs::path run_dir = trained() / "run";
  for (const char* f : {"checkpoint.sack", "train_log.jsonl", "generator_log.jsonl", "audit.json", "summary.json",
                        "manifest.json"}) {
    INFO(f);
    CHECK(fs::exists(run_dir / f));
  }
  const nlohmann::json audit = nlohmann::json::parse(slurp(run_dir / "audit.json"));
  CHECK(audit["passed"] == true);
  const nlohmann::json manifest = nlohmann::json::parse(slurp(run_dir / "manifest.json"));
  CHECK(manifest["command"] == "train");
}

TEST_CASE("config file supplies flags and the command line wins") {
  const fs::path d = testing::scratch_dir("cli_config");
  std::ofstream(d / "gen.cfg") << "# dataset\nn = 0\nseed = 4\n";
  CHECK(run("gen-data --config " + (d / "gen.cfg").string() + " --out " + (d / "x").string()).code == 2);
  CHECK(run("gen-data --config " + (d / "gen.cfg").string() + " --out " + (d / "y").string() + " --n 10").code == 0);
  const nlohmann::json j = nlohmann::json::parse(slurp(d / "y" / "dataset.json"));
  CHECK(j["seed"] == 4);
  std::ofstream(d / "bad.cfg") << "colour = blue\n";
  const Run bad = run("gen-data --config " + (d / "bad.cfg").string() + " --out " + (d / "z").string());
  CHECK(bad.code == 2);
  CHECK(bad.output.find("colour") != std::string::npos);
}

TEST_CASE("predict in auto mode emits mask, score and prompts") {
  const fs::path d = testing::scratch_dir("cli_predict");
  const std::string ckpt = (trained() / "run" / "checkpoint.sack").string();
  const std::string image = (trained() / "data" / "test" / "images" / "00000.pgm").string();
  const fs::path image_path(image);
  REQUIRE(fs::exists(image_path));
  REQUIRE(run("predict --ckpt " + ckpt + " --image " + image + " --out " + (d / "auto").string()).code == 0);
  const cellprompt::GrayImage mask = cellprompt::read_pgm((d / "auto" / "mask.pgm").string());
  CHECK(mask.width == 64);
  CHECK(mask.height == 64);
  const nlohmann::json pred = nlohmann::json::parse(slurp(d / "auto" / "prediction.json"));
  CHECK(pred["score"].get<double>() >= 0.0);
  CHECK(pred["score"].get<double>() <= 1.0);
  REQUIRE(fs::exists(d / "auto" / "prompts.csv"));
  const cellprompt::PromptSet auto_prompts = cellprompt::read_prompts_csv((d / "auto" / "prompts.csv").string());
  CHECK(auto_prompts.size() == pred["prompt_count"].get<std::size_t>());

  std::ofstream(d / "manual.csv") << "x,y,label\n5,6,1\n40,41,0\n";
  REQUIRE(run("predict --ckpt " + ckpt + " --image " + image + " --prompts " + (d / "manual.csv").string() + " --out " +
              (d / "manual").string())
              .code == 0);
  CHECK(nlohmann::json::parse(slurp(d / "manual" / "prediction.json"))["prompt_count"] == 2);
  CHECK_FALSE(fs::exists(d / "manual" / "prompts.csv"));

  std::ofstream(d / "broken.csv") << "x,y,label\n5,6,1\n7,oops,1\n";
  const Run bad = run("predict --ckpt " + ckpt + " --image " + image + " --prompts " + (d / "broken.csv").string() +
                      " --out " + (d / "broken").string());
  CHECK(bad.code == 2);
  CHECK(bad.output.find(":3:") != std::string::npos);

  REQUIRE(run("predict --ckpt " + ckpt + " --image " + image + " --out " + (d / "again").string()).code == 0);
  CHECK(slurp(d / "auto" / "mask.pgm") == slurp(d / "again" / "mask.pgm"));
  CHECK(slurp(d / "auto" / "prediction.json") == slurp(d / "again" / "prediction.json"));
}

TEST_CASE("evaluate writes exactly f1, iou and dice deterministically") {
  const fs::path d = testing::scratch_dir("cli_eval");
  const std::string base = "evaluate --ckpt " + (trained() / "run" / "checkpoint.sack").string() + " --data " +
                           (trained() / "data").string() + " --out ";
  REQUIRE(run(base + (d / "a").string()).code == 0);
  REQUIRE(run(base + (d / "b").string()).code == 0);
  const nlohmann::json m = nlohmann::json::parse(slurp(d / "a" / "metrics.json"));
  CHECK(m.size() == 3);
  CHECK(m.contains("f1"));
  CHECK(m.contains("iou"));
  CHECK(m.contains("dice"));
  CHECK(slurp(d / "a" / "metrics.json") == slurp(d / "b" / "metrics.json"));
}

TEST_CASE("ablate-selection and count-params reports") {
  const fs::path d = testing::scratch_dir("cli_ablate");
  const std::string ckpt = (trained() / "run" / "checkpoint.sack").string();
  REQUIRE(run("ablate-selection --ckpt " + ckpt + " --data " + (trained() / "data").string() + " --out " +
              (d / "ab").string() + " --timing-repeats 2")
              .code == 0);
  const nlohmann::json t = nlohmann::json::parse(slurp(d / "ab" / "ablation.json"));
  std::vector<std::string> names;
  for (const auto& row : t["rows"]) {
    names.push_back(row["name"]);
    CHECK(row.contains("select_seconds_per_image"));
  }
  CHECK(names == std::vector<std::string>{"O-1-point", "O-3-point", "O-256-point", "R-1-point", "R-3-point",
                                          "R-256-point"});

  const Run c = run("count-params --ckpt " + ckpt + " --out " + (d / "cp").string());
  REQUIRE(c.code == 0);
  CHECK(c.output.find("Trainable:") != std::string::npos);
  const nlohmann::json p = nlohmann::json::parse(slurp(d / "cp" / "params.json"));
  CHECK(p["trainable"].get<std::size_t>() + p["frozen"].get<std::size_t>() == p["total"].get<std::size_t>());
  // depth 1, width 16, rank 4: two adapted projections of 2*r*d each.
  CHECK(p["encoder_attention"]["trainable"] == 2 * 2 * 4 * 16);
}

TEST_CASE("overlay draws boundary and prompt dots") {
  const fs::path d = testing::scratch_dir("cli_overlay");
  cellprompt::GrayImage img{8, 8, 255, std::vector<std::uint16_t>(64, 100)};
  cellprompt::write_pgm((d / "img.pgm").string(), img);
  cellprompt::Tensor mask({8, 8});
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) mask.at(y, x) = 1.0;
  cellprompt::write_mask_pgm((d / "mask.pgm").string(), mask);
  std::ofstream(d / "p.csv") << "x,y,label\n1,6,1\n6,1,0\n";

  REQUIRE(run("overlay --image " + (d / "img.pgm").string() + " --mask " + (d / "mask.pgm").string() + " --out " +
              (d / "plain.ppm").string())
              .code == 0);
  const cellprompt::RgbImage plain = cellprompt::read_ppm((d / "plain.ppm").string());
  CHECK(plain.width == 8);
  CHECK(plain.height == 8);
  auto px = [](const cellprompt::RgbImage& im, std::size_t x, std::size_t y) {
    const std::size_t i = 3 * (y * im.width + x);
    return std::array<int, 3>{im.rgb[i], im.rgb[i + 1], im.rgb[i + 2]};
  };
  CHECK(px(plain, 0, 0) == std::array<int, 3>{100, 100, 100});
  CHECK(px(plain, 3, 3) == std::array<int, 3>{100, 100, 100});
  CHECK(px(plain, 2, 2) != std::array<int, 3>{100, 100, 100});

  REQUIRE(run("overlay --image " + (d / "img.pgm").string() + " --mask " + (d / "mask.pgm").string() + " --prompts " +
              (d / "p.csv").string() + " --out " + (d / "dots.ppm").string())
              .code == 0);
  const cellprompt::RgbImage dots = cellprompt::read_ppm((d / "dots.ppm").string());
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      CHECK(px(dots, 1 + dx, 6 + dy) == std::array<int, 3>{0, 0, 255});
      CHECK(px(dots, 6 + dx, 1 + dy) == std::array<int, 3>{255, 105, 180});
    }
  }
  CHECK(px(dots, 3, 6) == px(plain, 3, 6));
  CHECK(slurp(d / "dots.ppm").rfind("P6\n8 8\n255\n", 0) == 0);
}

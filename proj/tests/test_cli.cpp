#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "support.hpp"

using namespace bqkit;
using bqkit::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args` (a shell fragment); stdout and stderr are captured.
Result cli(const TempDir& dir, const std::string& args, const std::string& env = {}) {
  const auto log = dir / "cli.log";
  const std::string cmd = "cd '" + dir.path().string() + "' && " + env + " '" BQKIT_CLI "' " + args +
                          " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// Snapshot of every regular file in `dir` except the log.
std::map<std::string, std::string> snapshot(const TempDir& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir.path()))
    if (e.is_regular_file() && e.path().filename() != "cli.log")
      files[e.path().filename().string()] = slurp(e.path());
  return files;
}

const std::string kSmallBlobs = "--n-train 300 --n-test 300";
const std::string kSmallTextures = "--n-train 300 --n-test 300";

void train_mlp(const TempDir& dir, const std::string& out = "m.nnmod") {
  const auto r = cli(dir, "train --arch mlp --data blobs --epochs 30 --seed 7 " + kSmallBlobs + " --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
}

}  // namespace

TEST(Cli, TrainWritesModelAndOneCsvRowPerEpoch) {
  TempDir dir("cli");
  train_mlp(dir);
  EXPECT_TRUE(fs::exists(dir / "m.nnmod"));
  EXPECT_EQ(line_count(dir / "m.nnmod.metrics.csv"), 31u);
  EXPECT_NO_THROW(load_model(dir / "m.nnmod"));
  EXPECT_TRUE(fs::exists(dir / "m.nnmod.run.json"));
}

TEST(Cli, TrainIsDeterministic) {
  TempDir dir("cli");
  train_mlp(dir, "a.nnmod");
  train_mlp(dir, "b.nnmod");
  EXPECT_EQ(slurp(dir / "a.nnmod"), slurp(dir / "b.nnmod"));
  EXPECT_EQ(slurp(dir / "a.nnmod.metrics.csv"), slurp(dir / "b.nnmod.metrics.csv"));
}

TEST(Cli, BadPathsFailWithoutPartialFiles) {
  TempDir dir("cli");
  auto r = cli(dir, "train --arch mlp --data blobs --epochs 1 --out missing_dir/m.nnmod");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("bqkit: error:"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "missing_dir"));
  r = cli(dir, "train --arch mlp --data no_such.nnd --epochs 1 --out m.nnmod");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(snapshot(dir).empty());
  r = cli(dir, "eval --model no_such.nnmod");
  EXPECT_NE(r.code, 0);
  r = cli(dir, "train --arch nope --out m.nnmod");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(snapshot(dir).empty());
}

TEST(Cli, AnalyzeRowCounts) {
  TempDir dir("cli");
  train_mlp(dir);
  auto r = cli(dir, "analyze --model m.nnmod --mode gaussian --std 0.05 " + kSmallBlobs + " --out g.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(csv_rows(dir / "g.csv").size(), 3u);  // one per weight layer
  r = cli(dir, "analyze --model m.nnmod --mode grad-vs-random --fraction 0.5 --std 0.05 --seeds 5 " + kSmallBlobs +
                   " --out gr.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(csv_rows(dir / "gr.csv").size(), 2u * 3u * 5u);
  r = cli(dir, "analyze --model m.nnmod --mode bins --bins 8 " + kSmallBlobs + " --out b.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(csv_rows(dir / "b.csv").size(), 8u);
  r = cli(dir, "analyze --model m.nnmod --mode u8-layers " + kSmallBlobs + " --out u.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(csv_rows(dir / "u.csv").size(), 3u);
}

TEST(Cli, ZeroStdGivesZeroDeltas) {
  TempDir dir("cli");
  train_mlp(dir);
  const auto r = cli(dir, "analyze --model m.nnmod --mode gaussian --std 0 --seeds 3 " + kSmallBlobs + " --out z.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = csv_rows(dir / "z.csv");
  ASSERT_EQ(rows.size(), 9u);
  for (const auto& row : rows) EXPECT_EQ(std::stod(row.back()), 0.0);
}

TEST(Cli, JobCountDoesNotChangeResults) {
  TempDir dir("cli");
  train_mlp(dir);
  const std::string args = "analyze --model m.nnmod --mode gaussian --std 0.1 --seeds 3 " + kSmallBlobs;
  ASSERT_EQ(cli(dir, "--jobs 1 " + args + " --out j1.csv").code, 0);
  ASSERT_EQ(cli(dir, "--jobs 3 " + args + " --out j3.csv").code, 0);
  ASSERT_EQ(cli(dir, args + " --out env.csv", "BQKIT_JOBS=2").code, 0);
  EXPECT_EQ(slurp(dir / "j1.csv"), slurp(dir / "j3.csv"));
  EXPECT_EQ(slurp(dir / "j1.csv"), slurp(dir / "env.csv"));
}

TEST(Cli, EvalMatchesAcrossRawContainerRoundTrip) {
  TempDir dir("cli");
  train_mlp(dir);
  ASSERT_EQ(cli(dir, "compress --model m.nnmod --layers 0 " + kSmallBlobs + " --out raw.bqz").code, 0);
  const auto a = cli(dir, "eval --model m.nnmod " + kSmallBlobs);
  const auto b = cli(dir, "eval --model raw.bqz " + kSmallBlobs);
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(a.out.rfind("accuracy ", 0), 0u) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(read_bqz(dir / "raw.bqz").model, load_model(dir / "m.nnmod"));
}

TEST(Cli, CompressListsAcceptedAndRejectedLayers) {
  TempDir dir("cli");
  train_mlp(dir);
  auto r = cli(dir, "compress --model m.nnmod --variant u8 --layer-drop 0.01 --eval-samples 1000 --layers 3 " +
                        kSmallBlobs + " --out u8.bqz");
  ASSERT_EQ(r.code, 0) << r.out;
  const Json report = Json::parse(slurp(dir / "u8.bqz.report.json"));
  ASSERT_EQ(report["layers"].size(), 3u);
  for (const auto& l : report["layers"]) {
    const std::string line = std::string(l["accepted"].get<bool>() ? "accepted " : "rejected ") +
                             l["layer"].get<std::string>() + ":";
    EXPECT_NE(r.out.find(line), std::string::npos) << line << "\n" << r.out;
    if (l["accepted"].get<bool>()) {
      EXPECT_LE(l["drop"].get<double>(), 0.01);
    } else {
      EXPECT_GT(l["drop"].get<double>(), 0.01);
    }
  }
  // A negative limit rejects every non-degenerate layer; each is named.
  r = cli(dir, "compress --model m.nnmod --layer-drop -1 --layers 3 " + kSmallBlobs + " --out none.bqz");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* layer : {"fc1", "fc2", "fc3"})
    EXPECT_NE(r.out.find(std::string("rejected ") + layer + ":"), std::string::npos) << r.out;
  EXPECT_TRUE(read_bqz(dir / "none.bqz").layers.empty());
}

TEST(Cli, ReportBitsPerWeightMatchesContainer) {
  TempDir dir("cli");
  ASSERT_EQ(cli(dir, "train --arch two-conv --data textures --epochs 2 " + kSmallTextures + " --out t.nnmod").code, 0);
  auto r = cli(dir, "gwk --model t.nnmod --train-data textures --epochs 1 --cv 4 --pw 2 --bits 4 " +
                        kSmallTextures + " --out g.bqz");
  ASSERT_EQ(r.code, 0) << r.out;
  r = cli(dir, "report g.bqz --out rep.json");
  ASSERT_EQ(r.code, 0) << r.out;
  const Json rep = Json::parse(slurp(dir / "rep.json"));
  const auto f = read_bqz(dir / "g.bqz");
  const auto bpw = bits_per_weight(f);
  ASSERT_EQ(rep["entries"].size(), 1u);
  const auto& e = rep["entries"][0];
  EXPECT_DOUBLE_EQ(e["bpw"].get<double>(), bpw.bpw);
  EXPECT_DOUBLE_EQ(e["label_bpw"].get<double>(), bpw.label_bpw);
  EXPECT_EQ(e["file_bytes"].get<std::size_t>(), fs::file_size(dir / "g.bqz"));
  EXPECT_DOUBLE_EQ(e["accuracy_delta"].get<double>(),
                   f.metrics()["final_accuracy"].get<double>() - f.metrics()["baseline_accuracy"].get<double>());
  EXPECT_LE(e["label_bpw"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "g.bqz.trace.csv"));
}

TEST(Cli, EveryCommandReproducesFromItsRunConfig) {
  TempDir dir("cli");
  const std::vector<std::string> commands = {
      "make-data --source textures --split test " + kSmallTextures + " --out te.nnd",
      "train --arch two-conv --data textures --epochs 2 " + kSmallTextures + " --out t.nnmod",
      "analyze --model t.nnmod --data textures --mode grad-vs-random --seeds 2 " + kSmallTextures + " --out a.csv",
      "compress --model t.nnmod --data te.nnd --layers 2 --huffman --out c.bqz",
      "gwk --model t.nnmod --train-data textures --test-data textures --epochs 1 " + kSmallTextures + " --out g.bqz",
      "eval --model c.bqz --data te.nnd --out e.json",
      "report c.bqz g.bqz --out r.json",
  };
  for (const auto& c : commands) {
    const auto r = cli(dir, c);
    ASSERT_EQ(r.code, 0) << c << "\n" << r.out;
  }
  const auto first = snapshot(dir);
  std::vector<std::string> configs;
  for (const auto& [name, _] : first)
    if (name.size() > 9 && name.substr(name.size() - 9) == ".run.json") configs.push_back(name);
  ASSERT_EQ(configs.size(), commands.size());
  for (const auto& [name, _] : first) fs::remove(dir / name);
  // Inputs needed by later commands are regenerated by replaying in order.
  for (const char* c : {"te.nnd.run.json", "t.nnmod.run.json", "a.csv.run.json", "c.bqz.run.json",
                        "g.bqz.run.json", "e.json.run.json", "r.json.run.json"}) {
    fs::path cfg = dir / "replay.json";
    {
      std::ofstream out(cfg, std::ios::binary);
      out << first.at(c);
    }
    const auto r = cli(dir, "run replay.json");
    ASSERT_EQ(r.code, 0) << c << "\n" << r.out;
  }
  fs::remove(dir / "replay.json");
  const auto second = snapshot(dir);
  ASSERT_EQ(second.size(), first.size());
  for (const auto& [name, bytes] : first) EXPECT_TRUE(second.at(name) == bytes) << name;
}

TEST(Cli, InputsAreNeverMutated) {
  TempDir dir("cli");
  train_mlp(dir);
  ASSERT_EQ(cli(dir, "make-data --source blobs --split test " + kSmallBlobs + " --out te.nnd").code, 0);
  const std::string model = slurp(dir / "m.nnmod"), data = slurp(dir / "te.nnd");
  for (const std::string c : {"analyze --model m.nnmod --data te.nnd --mode bins --out x.csv",
                              "compress --model m.nnmod --data te.nnd --layers 3 --out x.bqz",
                              "eval --model m.nnmod --data te.nnd --out x.json"})
    ASSERT_EQ(cli(dir, c).code, 0) << c;
  EXPECT_EQ(slurp(dir / "m.nnmod"), model);
  EXPECT_EQ(slurp(dir / "te.nnd"), data);
  const auto r = cli(dir, "compress --model m.nnmod --data te.nnd --out m.nnmod");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("refusing to overwrite"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(dir / "m.nnmod"), model);
}

TEST(Cli, RunRejectsForeignConfigs) {
  TempDir dir("cli");
  {
    std::ofstream(dir / "bad.json") << "{\"tool\": \"other\", \"version\": 1}";
    std::ofstream(dir / "junk.json") << "not json";
  }
  EXPECT_NE(cli(dir, "run bad.json").code, 0);
  EXPECT_NE(cli(dir, "run junk.json").code, 0);
  EXPECT_NE(cli(dir, "run missing.json").code, 0);
}

TEST(Cli, SplitMismatchIsAnError) {
  TempDir dir("cli");
  train_mlp(dir);
  ASSERT_EQ(cli(dir, "make-data --source blobs --split train " + kSmallBlobs + " --out tr.nnd").code, 0);
  const auto r = cli(dir, "eval --model m.nnmod --data tr.nnd");
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(cli(dir, "eval --model m.nnmod --data tr.nnd --split train").code, 0);
}

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>

#include "memeguard/workflows.hpp"
#include "support.hpp"

using namespace memeguard;
using testing_support::mini_dataset;
using testing_support::read_text;
using testing_support::TempDir;
using testing_support::write_text;

namespace {

std::map<std::string, std::string> tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = read_text(e.path());
  return out;
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const std::string& args, const TempDir& t) {
  const auto out = t / "stdout.txt", err = t / "stderr.txt";
  const std::string cmd =
      std::string(MEMEGUARD_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(out), read_text(err)};
}

}  // namespace

TEST(Pipeline, InProcessDeterministicWithoutNetwork) {
  TempDir a, b;
  Config c;
  c.seed = 3;
  const auto wire = HttpTransport::wire_requests();
  for (const auto* dir : {&a, &b}) {
    Gateway gw(workflows::gateway_options(c, dir->path()));
    workflows::run_pipeline(c, gw, mini_dataset(), dir->path());
  }
  EXPECT_EQ(HttpTransport::wire_requests(), wire);
  const auto ta = tree(a.path()), tb = tree(b.path());
  EXPECT_EQ(ta, tb);
  for (const char* f : {"knowledge.jsonl", "filtered.jsonl", "trace.jsonl", "knowledge_raw_vlm.jsonl",
                        "interventions.jsonl", "run_meta.json"})
    EXPECT_TRUE(ta.count(f)) << f;
  const auto ivs = load_interventions(a / "interventions.jsonl");
  EXPECT_EQ(ivs.size(), 3u * kSettings.size());
}

TEST(Pipeline, SeedChangesMockOutput) {
  TempDir a, b;
  Config c;
  for (const auto* dir : {&a, &b}) {
    Gateway gw(workflows::gateway_options(c, dir->path()));
    workflows::run_pipeline(c, gw, mini_dataset(), dir->path());
    c.seed = 99;
    c.set("llm.url", "mock://hash");
  }
  EXPECT_NE(read_text(a / "interventions.jsonl"), read_text(b / "interventions.jsonl"));
}

TEST(Cli, PipelineTwiceIdentical) {
  TempDir t;
  const std::string common = "--seed 7 pipeline --dataset " + mini_dataset().string();
  ASSERT_EQ(cli("--out " + (t / "r1").string() + " " + common, t).code, 0);
  const CliRun second = cli("--out " + (t / "r2").string() + " " + common, t);
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_NE(second.out.find("interventions.jsonl"), std::string::npos);
  EXPECT_EQ(tree(t / "r1"), tree(t / "r2"));
}

TEST(Cli, StagesMatchPipeline) {
  TempDir t;
  const std::string ds = mini_dataset().string(), o = (t / "s").string();
  ASSERT_EQ(cli("--out " + o + " knowledge --dataset " + ds, t).code, 0);
  ASSERT_EQ(cli("--out " + o + " filter --dataset " + ds + " --knowledge " + o + "/knowledge.jsonl", t).code, 0);
  ASSERT_EQ(cli("--out " + o + " intervene --setting memeguard --dataset " + ds + " --knowledge " + o + "/filtered.jsonl", t).code, 0);
  ASSERT_EQ(cli("--out " + (t / "p").string() + " pipeline --dataset " + ds, t).code, 0);
  EXPECT_EQ(read_text(t / "s" / "filtered.jsonl"), read_text(t / "p" / "filtered.jsonl"));
  const auto staged = load_interventions(t / "s" / "interventions.jsonl");
  const auto full = load_interventions(t / "p" / "interventions.jsonl");
  for (const auto& iv : staged) {
    const auto it = std::find_if(full.begin(), full.end(), [&](const Intervention& f) {
      return f.meme_id == iv.meme_id && f.setting == iv.setting;
    });
    ASSERT_NE(it, full.end());
    EXPECT_EQ(it->text, iv.text);
  }
  const CliRun ev = cli("--out " + o + " evaluate --dataset " + ds + " --interventions " + o + "/interventions.jsonl", t);
  ASSERT_EQ(ev.code, 0) << ev.err;
}

TEST(Cli, ExitCodes) {
  TempDir t;
  EXPECT_EQ(cli("--help", t).code, 0);
  EXPECT_EQ(cli("", t).code, 2);
  EXPECT_EQ(cli("pipeline --bogus", t).code, 2);
  EXPECT_EQ(cli("pipeline", t).code, 2);
  EXPECT_EQ(cli("pipeline --dataset " + (t / "none.jsonl").string(), t).code, 2);
  EXPECT_EQ(cli("--threshold 2 pipeline --dataset " + mini_dataset().string(), t).code, 2);
  write_text(t / "broken.jsonl", "{\"id\": \"x\"}\n");
  const CliRun broken = cli("--out " + (t / "o").string() + " pipeline --dataset " + (t / "broken.jsonl").string(), t);
  EXPECT_EQ(broken.code, 1);
  EXPECT_NE(broken.err.find("error: [pipeline]"), std::string::npos) << broken.err;
  EXPECT_EQ(cli("--set mks.threshold=2 pipeline --dataset " + mini_dataset().string(), t).code, 1);
  EXPECT_EQ(cli("--set nonsense pipeline --dataset " + mini_dataset().string(), t).code, 1);
  const CliRun down = cli("--out " + (t / "d").string() + " --set llm.url=http://127.0.0.1:1/ --set llm.max_retries=0 " +
                           "intervene --setting ocr_only --dataset " + mini_dataset().string(),
                       t);
  EXPECT_EQ(down.code, 1);
  EXPECT_NE(down.err.find("error: [intervene]"), std::string::npos) << down.err;
}

TEST(Cli, AdapterCheck) {
  TempDir t;
  const CliRun r = cli("adapter-check --d 8 --r 3 --seed 1 --eps 1e-5", t);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LE(std::stod(r.out), 1e-4);
  EXPECT_NE(r.out.find('e'), std::string::npos);
}

TEST(Cli, SweepWritesCsv) {
  TempDir t;
  const CliRun r = cli("--out " + t.path().string() + " --run-id sw sweep --dataset " + mini_dataset().string() +
                        " --thresholds 0.0..1.0:0.25",
                    t);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_text(t / "reports" / "sw" / "sweep.csv");
  EXPECT_EQ(csv.rfind("threshold,rouge_l,bleu_avg,hmean,bertscore_f1\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(cli("sweep --dataset " + mini_dataset().string() + " --thresholds 0.5,0.2", t).code, 1);
}

TEST(Cli, AgreementFromFiles) {
  TempDir t;
  write_text(t / "a.jsonl",
             R"({"meme_id":"1","evaluator_id":"x","fluency":5,"adequacy":4,"persuasiveness":3,"informativeness":5})"
             "\n"
             R"({"meme_id":"2","evaluator_id":"x","fluency":2,"adequacy":4,"persuasiveness":3,"informativeness":5})"
             "\n");
  write_text(t / "b.jsonl",
             R"({"meme_id":"1","evaluator_id":"y","fluency":5,"adequacy":4,"persuasiveness":2,"informativeness":5})"
             "\n"
             R"({"meme_id":"2","evaluator_id":"y","fluency":3,"adequacy":4,"persuasiveness":3,"informativeness":5})"
             "\n");
  const CliRun r = cli("--out " + t.path().string() + " --run-id ag agreement " + (t / "a.jsonl").string() + " " +
                        (t / "b.jsonl").string(),
                    t);
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(read_text(t / "reports" / "ag" / "agreement.json"));
  EXPECT_EQ(rep["common_items"], 2);
  EXPECT_DOUBLE_EQ(rep["agreement_pct"]["fluency"].get<double>(), 50.0);
  EXPECT_DOUBLE_EQ(rep["agreement_pct"]["adequacy"].get<double>(), 100.0);
  write_text(t / "c.jsonl",
             R"({"meme_id":"9","evaluator_id":"y","fluency":5,"adequacy":4,"persuasiveness":2,"informativeness":5})"
             "\n");
  EXPECT_EQ(cli("agreement " + (t / "a.jsonl").string() + " " + (t / "c.jsonl").string(), t).code, 1);
}

TEST(Cli, LengthStats) {
  TempDir t;
  const CliRun r = cli("length-stats --dataset " + mini_dataset().string(), t);
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["ocr_text"]["count"], 3);
  // "women drivers be like" and the two other fixture captions
  EXPECT_EQ(j["ocr_text"]["min"], 4);
}

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include "helpers.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
    static const fs::path p = [] {
        auto d = fs::temp_directory_path() / ("icldiff_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Run cli(const std::string& args) {
    const fs::path out = work() / "stdout.txt", err = work() / "stderr.txt";
    const std::string cmd = std::string("\"") + ICLDIFF_CLI_PATH + "\" " + args + " >" + out.string() + " 2>" + err.string();
    const int status      = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out  = slurp(out);
    r.err  = slurp(err);
    return r;
}

std::string path(const std::string& name) { return (work() / name).string(); }

// Micro model config file shared by the tests below.
const std::string& micro_config() {
    static const std::string p = [] {
        const auto file = path("micro.json");
        std::ofstream f(file);
        f << R"({"corpus": {"image_size": 8},
 "model": {"d": 16, "text": {"layers": 1, "heads": 2},
           "context": {"patch": 4, "width": 16, "depth": 1, "heads": 2},
           "unet": {"base": 8, "mult": [1], "res_blocks": 1, "attn_levels": 1, "heads": 2, "temb_dim": 16, "groups": 4}},
 "diffusion": {"sample_steps": 3},
 "train": {"steps": 2, "batch_size": 2, "log_every": 1},
 "eval": {"n": 2, "batch": 2, "probe_m": 2, "contact_rows": 2}})";
        return file;
    }();
    return p;
}

// Stage A then stage B on the micro config; built once.
const std::string& micro_stage_b() {
    static const std::string p = [] {
        auto a = cli("train --config " + micro_config() + " --stage A --out " + path("runA"));
        EXPECT_EQ(a.code, 0) << a.err;
        auto b = cli("train --stage B --init " + path("runA/final.bin") + " --out " + path("runB"));
        EXPECT_EQ(b.code, 0) << b.err;
        return path("runB/final.bin");
    }();
    return p;
}

}  // namespace

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("frobnicate").code, 2);
    EXPECT_EQ(cli("train --stage A").code, 2);  // --out missing
    EXPECT_EQ(cli("--help").code, 0);
    auto r = cli("train --stage B --out " + path("noinit"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--init"), std::string::npos) << r.err;
    EXPECT_EQ(cli("train --stage C --out " + path("badstage")).code, 2);
    EXPECT_EQ(cli("train --config " + micro_config() + " --set train.nope=1 --stage A --out " + path("badkey")).code, 2);
    EXPECT_EQ(cli("train --config " + path("missing.json") + " --stage A --out " + path("nocfg")).code, 3);
}

TEST(Cli, GenCorpusZeroCountAndSmallCorpus) {
    auto r = cli("gen-corpus --config " + micro_config() + " --count 0 --out " + path("corpus0"));
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("corpus0/manifest.jsonl")));
    EXPECT_EQ(slurp(path("corpus0/manifest.jsonl")), "");

    r = cli("gen-corpus --config " + micro_config() + " --count 1 --seed 4 --out " + path("corpus1"));
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("manifest.jsonl"), std::string::npos);
    auto items = icl::read_corpus(path("corpus1"));
    EXPECT_EQ(items.size(), 12u);
    r = cli("gen-corpus --config " + micro_config() + " --count 1 --seed 4 --out " + path("corpus1b"));
    EXPECT_EQ(slurp(path("corpus1/manifest.jsonl")), slurp(path("corpus1b/manifest.jsonl")));
}

TEST(Cli, ZeroStepsAndConfigEchoReproducesTheRun) {
    auto r = cli("train --config " + micro_config() + " --stage A --steps 0 --out " + path("zero"));
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("zero/final.bin")));
    EXPECT_EQ(icl::load_checkpoint(path("zero/final.bin")).step, 0);

    r = cli("train --config " + micro_config() + " --set train.lr=0.002 --stage A --out " + path("echo1"));
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli("train --config " + path("echo1/config.json") + " --stage A --out " + path("echo2"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("echo1/final.bin")), slurp(path("echo2/final.bin")));
    EXPECT_EQ(slurp(path("echo1/config.json")), slurp(path("echo2/config.json")));
    EXPECT_NE(slurp(path("echo1/config.json")).find("0.002"), std::string::npos);
}

TEST(Cli, SampleIsDeterministicAndChecksInputs) {
    const auto ck = micro_stage_b();
    ASSERT_TRUE(fs::exists(ck));
    icl::CorpusConfig cc = icl::testing::corpus_of_size(8);
    icl::Rng rng(3);
    auto item = icl::make_item(rng, icl::TaskSpec::parse("img2edge"), 2, cc);
    fs::create_directories(path("ctx"));
    for (size_t i = 0; i < item.context.size(); i++) {
        icl::write_png(path("ctx/ctx" + std::to_string(i) + "_src.png"), item.context[i].source);
        icl::write_png(path("ctx/ctx" + std::to_string(i) + "_tgt.png"), item.context[i].target);
    }
    icl::write_png(path("query.png"), item.query);
    const std::string base = "sample --checkpoint " + ck + " --context-dir " + path("ctx") + " --query " + path("query.png");
    auto a = cli(base + " --seed 9 --out " + path("s1.png"));
    ASSERT_EQ(a.code, 0) << a.err;
    auto b = cli(base + " --seed 9 --out " + path("s2.png"));
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(slurp(path("s1.png")), slurp(path("s2.png")));
    EXPECT_TRUE(fs::exists(path("s1_sheet.png")));
    auto img = icl::read_png(path("s1.png"));
    EXPECT_EQ(img.shape, item.query.shape);

    auto none = cli(base + " --mode none --out " + path("s_none.png"));
    EXPECT_EQ(none.code, 0) << none.err;

    EXPECT_EQ(cli(base + " --mode concat --out " + path("s5.png")).code, 2);
    EXPECT_EQ(cli(base + " --steps 0 --out " + path("s6.png")).code, 2);

    icl::write_png(path("big.png"), icl::make_image(16, 16));
    EXPECT_EQ(cli("sample --checkpoint " + ck + " --context-dir " + path("ctx") + " --query " + path("big.png") + " --out " +
                  path("s7.png"))
                  .code,
              2);

    fs::remove(path("ctx/ctx1_tgt.png"));
    auto missing = cli(base + " --out " + path("s3.png"));
    EXPECT_EQ(missing.code, 3);
    EXPECT_NE(missing.err.find("ctx1_tgt.png"), std::string::npos) << missing.err;
    EXPECT_EQ(cli("sample --checkpoint " + ck + " --context-dir " + path("nowhere") + " --query " + path("query.png") +
                  " --out " + path("s4.png"))
                  .code,
              3);
}

TEST(Cli, EvalAndProbeWriteTheirTables) {
    const auto ck = micro_stage_b();
    auto r = cli("eval --checkpoint " + ck + " --tasks img2edge,seg2img,blur2img --modes empty,full --n 2 --out " + path("ev"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("skipping seg2img"), std::string::npos);
    const auto table = slurp(path("ev/table.csv"));
    EXPECT_EQ(table.substr(0, table.find('\n')), "checkpoint,mode,img2edge,blur2img");
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
    EXPECT_TRUE(fs::exists(path("ev/detail.csv")));
    EXPECT_TRUE(fs::exists(path("ev/config.json")));

    auto again = cli("eval --checkpoint " + ck + " --tasks img2edge,seg2img,blur2img --modes empty,full --n 2 --out " + path("ev2"));
    EXPECT_EQ(slurp(path("ev2/table.csv")), table);

    EXPECT_EQ(cli("eval --checkpoint " + ck + " --context sideways --out " + path("ev3")).code, 2);
    EXPECT_EQ(cli("eval --checkpoint " + path("nothing.bin") + " --out " + path("ev4")).code, 3);

    auto p = cli("probe --checkpoint " + ck + " --out " + path("pr"));
    ASSERT_EQ(p.code, 0) << p.err;
    EXPECT_TRUE(fs::exists(path("pr/projection.csv")));
    auto j = icl::read_json_file(path("pr/probe.json"));
    EXPECT_GE(j.at("accuracy").get<double>(), 0.0);
    EXPECT_EQ(j.at("chance").get<double>(), 0.125);

    // A stage-A checkpoint has no context encoder.
    EXPECT_EQ(cli("probe --checkpoint " + path("runA/final.bin") + " --out " + path("pr2")).code, 5);
}

TEST(Cli, CorruptCheckpointExitsFive) {
    {
        std::ofstream f(path("junk.bin"), std::ios::binary);
        f << "definitely not a checkpoint";
    }
    auto r = cli("probe --checkpoint " + path("junk.bin") + " --out " + path("pj"));
    EXPECT_EQ(r.code, 5);
    EXPECT_NE(r.err.find("junk.bin"), std::string::npos) << r.err;
    // A stage-B init whose model section differs from the run config.
    const auto ck = micro_stage_b();
    (void)ck;
    EXPECT_EQ(cli("train --stage B --init " + path("runA/final.bin") + " --set model.d=32 --out " + path("mm")).code, 5);
}

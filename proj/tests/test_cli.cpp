#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "peterrec/adapters.hpp"
#include "peterrec/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int status = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

/// Work directory shared by the suite; the tiny corpus and pre-trained
/// checkpoint are produced once.
class Cli : public ::testing::Test {
protected:
    static fs::path dir;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("peterrec-cli-" + std::to_string(::getpid()));
        fs::create_directories(dir);
        ASSERT_EQ(run("synth --out-dir " + path("data") +
                      " --clusters 4 --items-per-cluster 12 --length 12 --source-users 200 --target-users 150 --seed 3")
                      .status,
                  0);
    }
    static void TearDownTestSuite() { fs::remove_all(dir); }

    static std::string path(const std::string& name) { return (dir / name).string(); }

    static Result run(const std::string& args, const std::string& env = "") {
        const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
        const std::string cmd = env + " " + PETERREC_CLI + std::string(" ") + args + " >" + out.string() + " 2>" + err.string();
        const int raw = std::system(cmd.c_str());
        return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
    }

    static std::string data_args() { return "--source " + path("data/source.tsv") + " --target " + path("data/target.tsv"); }

    static constexpr const char* kArch = " --k 16 --dilations 1,2,1,2 --length 12 ";
};

fs::path Cli::dir;

std::vector<nlohmann::json> json_lines(const std::string& text) {
    std::vector<nlohmann::json> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty() && line[0] == '{') out.push_back(nlohmann::json::parse(line));
    return out;
}

} // namespace

TEST_F(Cli, PretrainBeatsRandomAndIsReproducible) {
    const auto a = run("pretrain --source " + path("data/source.tsv") + " --out " + path("a.ckpt") + kArch +
                       "--pretrain-epochs 5 --pretrain-lr 5e-3 --seed 2 --log " + path("pre.jsonl"));
    ASSERT_EQ(a.status, 0) << a.err;
    const auto log = json_lines(slurp(path("pre.jsonl")));
    ASSERT_EQ(log.size(), 5u);
    EXPECT_GT(log.back()["valid_mrr5"].get<double>(), log.back()["random_mrr5"].get<double>());
    const auto b = run("pretrain --source " + path("data/source.tsv") + " --out " + path("b.ckpt") + kArch +
                       "--pretrain-epochs 5 --pretrain-lr 5e-3 --seed 2");
    ASSERT_EQ(b.status, 0) << b.err;
    EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
}

TEST_F(Cli, FinetuneEvalExportPipeline) {
    ASSERT_EQ(run("pretrain --source " + path("data/source.tsv") + " --out " + path("pre.ckpt") + kArch +
                  "--pretrain-epochs 2 --seed 1")
                  .status,
              0);
    const auto ft = run("finetune " + data_args() + " --checkpoint " + path("pre.ckpt") + kArch +
                        "--d 2 --epochs 3 --batch 32 --seed 1 --report " + path("r.jsonl") + " --out " + path("ft.ckpt"));
    ASSERT_EQ(ft.status, 0) << ft.err;
    const auto summary = json_lines(ft.out).at(0);
    const auto report = json_lines(slurp(path("r.jsonl")));
    ASSERT_EQ(report.size(), 4u);
    EXPECT_EQ(report.back(), summary);

    // Frozen partition of the fine-tuned checkpoint matches the pre-trained one.
    const auto pre = peterrec::load_checkpoint(path("pre.ckpt"));
    const auto tuned = peterrec::load_checkpoint(path("ft.ckpt"));
    std::vector<std::string> frozen;
    for (const auto& p : tuned.params.items())
        if (p.partition == peterrec::Partition::kFrozen) frozen.push_back(p.name);
    EXPECT_FALSE(frozen.empty());
    EXPECT_EQ(peterrec::named_digest(tuned.params, frozen), peterrec::named_digest(pre.params, frozen));

    const std::string eval = "eval " + data_args() + " --checkpoint " + path("ft.ckpt") + " --length 12 --seed 1";
    const auto e1 = run(eval), e2 = run(eval);
    ASSERT_EQ(e1.status, 0) << e1.err;
    EXPECT_EQ(e1.out, e2.out);
    EXPECT_EQ(json_lines(e1.out).at(0)["acc"], summary["test_acc"]);

    const auto ex = run("export --json --checkpoint " + path("ft.ckpt"));
    ASSERT_EQ(ex.status, 0) << ex.err;
    const auto j = nlohmann::json::parse(ex.out);
    const auto counts = peterrec::count_parameters(tuned.model());
    EXPECT_EQ(j["total"].get<std::uint64_t>(), counts.total);
    EXPECT_EQ(j["tunable"].get<std::uint64_t>(), counts.tunable);
    EXPECT_EQ(j["tunable"], summary["tunable"]);

    const auto plot = run("plot --report " + path("r.jsonl") + " --out " + path("curve.svg"));
    ASSERT_EQ(plot.status, 0) << plot.err;
    EXPECT_NE(slurp(path("curve.svg")).find("<polyline"), std::string::npos);
}

TEST_F(Cli, MemorisesATinyTrainingSplit) {
    const auto ft = run("finetune " + data_args() + " --mode finezero" + kArch +
                        "--epochs 60 --batch 32 --lr 1e-2 --seed 4 --out " + path("mem.ckpt"));
    ASSERT_EQ(ft.status, 0) << ft.err;
    const auto e = run("eval " + data_args() + " --checkpoint " + path("mem.ckpt") + " --length 12 --seed 4 --split train");
    ASSERT_EQ(e.status, 0) << e.err;
    EXPECT_DOUBLE_EQ(json_lines(e.out).at(0)["acc"].get<double>(), 1.0);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
    {
        std::ofstream cfg(path("run.cfg"));
        cfg << "k = 16\ndilations = 1,2,1,2\nlength = 12\nmode = labelcs\nseed = 5\n";
    }
    const auto a = run("finetune " + data_args() + " --config " + path("run.cfg"));
    ASSERT_EQ(a.status, 0) << a.err;
    EXPECT_EQ(json_lines(a.out).at(0)["mode"], "labelcs");
    const auto b = run("finetune " + data_args() + " --config " + path("run.cfg") + " --mode finezero --epochs 1");
    ASSERT_EQ(b.status, 0) << b.err;
    EXPECT_EQ(json_lines(b.out).at(0)["mode"], "finezero");
}

TEST_F(Cli, SeedFallsBackToTheEnvironment) {
    ASSERT_EQ(run("synth --out-dir " + path("s1") + " --source-users 50 --target-users 10 --seed 8").status, 0);
    ASSERT_EQ(run("synth --out-dir " + path("s2") + " --source-users 50 --target-users 10", "PETERREC_SEED=8").status, 0);
    ASSERT_EQ(run("synth --out-dir " + path("s3") + " --source-users 50 --target-users 10", "PETERREC_SEED=9").status, 0);
    EXPECT_EQ(slurp(path("s1/source.tsv")), slurp(path("s2/source.tsv")));
    EXPECT_NE(slurp(path("s1/source.tsv")), slurp(path("s3/source.tsv")));
}

TEST_F(Cli, FailuresExitNonzeroWithOneCodedLine) {
    auto check = [](const Result& r, const std::string& code) {
        EXPECT_NE(r.status, 0);
        EXPECT_EQ(r.err.rfind("error[" + code + "]: ", 0), 0u) << r.err;
        EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    };
    const std::string src = " --source " + path("data/source.tsv") + " --out " + path("x.ckpt");
    check(run("pretrain" + src + " --objective masked"), "config");
    check(run("pretrain" + src + " --causal false --objective ar"), "config");
    check(run("finetune " + data_args() + " --head noncausal-both-tcl --mode finezero"), "config");
    check(run("finetune " + data_args() + " --mode peterrec"), "config");
    check(run("pretrain --source " + path("missing.tsv") + " --out " + path("x.ckpt")), "io");
    check(run("pretrain" + src + " --no-such-flag 1"), "usage");
    check(run("pretrain" + src + " --k banana"), "config");
    {
        std::ofstream bad(path("bad.tsv"));
        bad << "1\t3,4\n2\tx\n";
    }
    check(run("pretrain --source " + path("bad.tsv") + " --out " + path("x.ckpt")), "parse");
    {
        std::ofstream junk(path("junk.ckpt"));
        junk << "hello\n";
    }
    check(run("export --checkpoint " + path("junk.ckpt")), "parse");
}

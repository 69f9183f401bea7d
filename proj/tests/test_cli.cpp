#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "icl_lab/config.hpp"
#include "icl_lab/embedcluster.hpp"
#include "icl_lab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace icl;

namespace {

struct Outcome {
    int code = -1;
    std::string output;  // stdout and stderr interleaved
};

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("icl_lab_cli_" + std::string(info->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    Outcome run(const std::string& args) const {
        const std::string log = path("cli.log");
        const std::string cmd = std::string("ICL_LAB_THREADS=1 '") + ICL_LAB_CLI_PATH + "' " + args + " > '" + log +
                                "' 2>&1";
        const int status = std::system(cmd.c_str());
        Outcome out;
        out.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        out.output = slurp(log);
        return out;
    }

    static std::string slurp(const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        return ss.str();
    }

    void write(const std::string& name, const std::string& text) const {
        std::ofstream os(path(name), std::ios::binary);
        os << text;
    }

    // Small model on a small Gaussian library; trains in well under a second.
    std::string tiny_config() const {
        write("tiny.cfg",
              "model.layers = 1\nmodel.model_dim = 16\nmodel.heads = 2\nmodel.mlp_hidden = 32\n"
              "optim.batch_size = 4\noptim.warmup_steps = 5\n"
              "library.num_classes = 20\nlibrary.exemplars_per_class = 4\nlibrary.exemplar_dim = 8\n"
              "train.total_steps = 10\ntrain.eval_every = 5\ntrain.checkpoint_every = 5\neval.episodes = 100\n");
        return path("tiny.cfg");
    }

    // Metrics CSV with a log-spaced triangle in the icl_acc column.
    void write_triangle_csv(const std::string& name, double scale) const {
        std::string text = std::string(kMetricsHeader) + "\n";
        for (int i = 0; i <= 50; ++i) {
            const double x = 1.0 + i / 10.0;
            double v = 0.5;
            if (x > 3.0 && x <= 4.0) {
                v = 0.5 + 0.5 * scale * (x - 3.0);
            } else if (x > 4.0) {
                v = 0.5 + 0.5 * scale - 0.2 * (x - 4.0);
            }
            MetricRecord r;
            r.step = std::llround(std::pow(10.0, x));
            r.icl_acc = v;
            r.train_acc = 1.0;
            text += format_metric_row(r);
        }
        write(name, text);
    }

    fs::path dir_;
};

std::vector<json> json_lines(const std::string& text) {
    std::vector<json> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) {
            out.push_back(json::parse(line));
        }
    }
    return out;
}

}  // namespace

TEST_F(Cli, UnknownConfigKeyIsNamed) {
    write("bad.cfg", "model.layers = 2\nmodel.layres = 3\n");
    const auto out = run("train '" + path("bad.cfg") + "' --out '" + path("run") + "'");
    EXPECT_EQ(out.code, 2) << out.output;
    EXPECT_NE(out.output.find("model.layres"), std::string::npos) << out.output;
    EXPECT_NE(out.output.find(":2"), std::string::npos) << out.output;

    const auto set = run("train '" + tiny_config() + "' --out '" + path("run") + "' --set nonsense.key=1");
    EXPECT_EQ(set.code, 2);
    EXPECT_NE(set.output.find("nonsense.key"), std::string::npos) << set.output;
}

TEST_F(Cli, ShippedConfigsParse) {
    int seen = 0;
    for (const auto& entry : fs::directory_iterator(ICL_LAB_CONFIG_DIR)) {
        if (entry.path().extension() == ".cfg") {
            EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
            ++seen;
        }
    }
    EXPECT_GE(seen, 20);
    const auto cfg = load_config(std::string(ICL_LAB_CONFIG_DIR) + "/default.cfg");
    EXPECT_EQ(cfg.train.model.layers, 12);
    EXPECT_EQ(cfg.train.model.model_dim, 64);
    EXPECT_EQ(cfg.train.model.heads, 8);
    EXPECT_EQ(cfg.train.optim.batch_size, 32);
    EXPECT_EQ(cfg.library.num_classes, 1600);
    EXPECT_EQ(cfg.library.exemplars_per_class, 20);
}

TEST_F(Cli, GenLibraryIsDeterministic) {
    const std::string flags = "--classes 50 --exemplars 4 --dim 8 --seed 1";
    const auto a = run("gen-library " + flags + " --out '" + path("a.icllib") + "'");
    const auto b = run("gen-library " + flags + " --out '" + path("b.icllib") + "'");
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(b.code, 0) << b.output;
    EXPECT_EQ(slurp(path("a.icllib")), slurp(path("b.icllib")));
    EXPECT_NE(a.output.find("K=50 E=4 D_x=8"), std::string::npos) << a.output;
    EXPECT_NE(a.output.find("separability="), std::string::npos);

    const auto c = run("gen-library --classes 50 --exemplars 4 --dim 8 --seed 2 --out '" + path("c.icllib") + "'");
    ASSERT_EQ(c.code, 0);
    EXPECT_NE(slurp(path("a.icllib")), slurp(path("c.icllib")));
}

TEST_F(Cli, GenLibraryClassSweepPreset) {
    const auto out = run("gen-library --classes 12800 --exemplars 20 --dim 4 --out '" + path("big.icllib") + "'");
    ASSERT_EQ(out.code, 0) << out.output;
    const auto lib = load_library(path("big.icllib"));
    EXPECT_EQ(lib.num_classes(), 12800);
    EXPECT_EQ(lib.size(), 256000u);
}

TEST_F(Cli, GenLibraryRejectsConflictingSources) {
    const auto out = run("gen-library --from-embeddings '" + path("x.emb") + "' --classes 10 --out '" +
                         path("x.icllib") + "'");
    EXPECT_EQ(out.code, 2) << out.output;
    EXPECT_NE(out.output.find("conflicts"), std::string::npos) << out.output;
    EXPECT_FALSE(fs::exists(path("x.icllib")));
}

TEST_F(Cli, ClusterShortfallIsReportedWithCounts) {
    Rng rng = Rng::stream(5, "cli_emb");
    std::vector<float> data(100 * 6);
    for (auto& v : data) {
        v = static_cast<float>(rng.normal());
    }
    save_embeddings(path("tiny.emb"), EmbeddingMatrix(100, 6, std::move(data)));
    const auto out = run("cluster-embeddings --input '" + path("tiny.emb") +
                         "' --no-subselect --k 100 --min-size 1 --num-classes 5 --per-class 1 --out '" +
                         path("lib.icllib") + "'");
    EXPECT_EQ(out.code, 2) << out.output;
    EXPECT_NE(out.output.find("only 0 clusters"), std::string::npos) << out.output;
    EXPECT_NE(out.output.find("shortfall 5"), std::string::npos) << out.output;
}

TEST_F(Cli, ClusterPipelineWritesLibrary) {
    // 40 tight groups of 6 around random directions.
    Rng rng = Rng::stream(6, "cli_emb");
    std::vector<float> data;
    for (int g = 0; g < 40; ++g) {
        std::vector<double> centre(8);
        for (auto& c : centre) {
            c = rng.normal();
        }
        for (int p = 0; p < 6; ++p) {
            for (double c : centre) {
                data.push_back(static_cast<float>(c + 0.01 * rng.normal()));
            }
        }
    }
    save_embeddings(path("g.emb"), EmbeddingMatrix(240, 8, std::move(data)));
    const auto out = run("cluster-embeddings --input '" + path("g.emb") +
                         "' --no-subselect --k 40 --min-size 5 --num-classes 30 --per-class 5 --out '" +
                         path("g.icllib") + "'");
    ASSERT_EQ(out.code, 0) << out.output;
    const auto lib = load_library(path("g.icllib"));
    EXPECT_EQ(lib.num_classes(), 30);
    EXPECT_EQ(lib.exemplars_per_class(), 5);

    const auto via_gen = run("gen-library --from-embeddings '" + path("g.emb") +
                             "' --no-subselect --k 40 --min-size 5 --num-classes 30 --per-class 5 --out '" +
                             path("g2.icllib") + "'");
    ASSERT_EQ(via_gen.code, 0) << via_gen.output;
    EXPECT_EQ(slurp(path("g.icllib")), slurp(path("g2.icllib")));
}

TEST_F(Cli, TrainZeroStepsWritesChanceRecordAndManifest) {
    const auto out = run("train '" + tiny_config() + "' --out '" + path("run") + "' --steps 0");
    ASSERT_EQ(out.code, 0) << out.output;
    const auto records = read_metrics_csv(path("run/metrics.csv"));
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].step, 0);

    const json manifest = json::parse(slurp(path("run/manifest.json")));
    EXPECT_EQ(manifest["final_step"], 0);
    for (const auto& artifact : manifest["artifacts"]) {
        EXPECT_TRUE(fs::exists(path("run/" + artifact.get<std::string>()))) << artifact;
    }
    EXPECT_TRUE(manifest["timings_seconds"].contains("training"));

    // The snapshot alone reproduces the run.
    const auto again = run("train '" + path("run/config.snapshot") + "' --out '" + path("run2") + "'");
    ASSERT_EQ(again.code, 0) << again.output;
    EXPECT_EQ(slurp(path("run/metrics.csv")), slurp(path("run2/metrics.csv")));
}

TEST_F(Cli, TrainFamilyOverrideAndResume) {
    const auto out = run("train '" + tiny_config() + "' --out '" + path("run") + "' --train-family icl-only");
    ASSERT_EQ(out.code, 0) << out.output;
    EXPECT_NE(slurp(path("run/config.snapshot")).find("train.family = icl-only"), std::string::npos);
    EXPECT_EQ(read_metrics_csv(path("run/metrics.csv")).size(), 3u);

    const auto half = run("train '" + tiny_config() + "' --out '" + path("split") +
                          "' --train-family icl-only --steps 5");
    ASSERT_EQ(half.code, 0) << half.output;
    const auto rest = run("train '" + tiny_config() + "' --out '" + path("split") + "' --train-family icl-only --resume");
    ASSERT_EQ(rest.code, 0) << rest.output;
    EXPECT_EQ(slurp(path("run/metrics.csv")), slurp(path("split/metrics.csv")));

    const auto bad = run("train '" + tiny_config() + "' --out '" + path("x") + "' --train-family sideways");
    EXPECT_EQ(bad.code, 2);
}

TEST_F(Cli, AnalyzeTriangleAndAggregate) {
    write_triangle_csv("a.csv", 1.0);
    write_triangle_csv("b.csv", 0.8);
    const auto one = run("analyze '" + path("a.csv") + "' --halflife 1e-9");
    ASSERT_EQ(one.code, 0) << one.output;
    const auto lines = json_lines(one.output);
    ASSERT_EQ(lines.size(), 1u);
    // The CSV carries six significant digits.
    EXPECT_NEAR(lines[0]["decay_slope"].get<double>(), -0.2, 1e-5);
    EXPECT_NEAR(lines[0]["peak_height"].get<double>(), 1.0, 1e-5);
    EXPECT_TRUE(lines[0]["transient"].get<bool>());
    EXPECT_EQ(lines[0]["metric"], "icl_acc");

    const auto two = run("analyze '" + path("a.csv") + "' '" + path("b.csv") + "' --halflife 1e-9 --out '" +
                         path("s.jsonl") + "'");
    ASSERT_EQ(two.code, 0) << two.output;
    const auto recs = json_lines(slurp(path("s.jsonl")));
    ASSERT_EQ(recs.size(), 3u);
    const auto& agg = recs[2]["aggregate"];
    EXPECT_NEAR(agg["peak_height"]["mean"].get<double>(), 0.95, 1e-5);
    EXPECT_NEAR(agg["peak_height"]["std"].get<double>(), std::sqrt(0.005), 1e-5);
    EXPECT_NEAR(agg["decay_slope"]["mean"].get<double>(), -0.2, 1e-5);
    EXPECT_EQ(agg["peak_height"]["n"], 2);

    const auto cmp = run("analyze '" + path("a.csv") + "' '" + path("b.csv") + "' --compare peak");
    ASSERT_EQ(cmp.code, 0) << cmp.output;
    EXPECT_NE(cmp.output.find("a"), std::string::npos);

    EXPECT_EQ(run("analyze '" + path("a.csv") + "' --metric bogus").code, 2);
    EXPECT_EQ(run("analyze '" + path("a.csv") + "' --window-end sideways").code, 2);
}

TEST_F(Cli, PlotDrawsOnePolylinePerColumn) {
    MetricRecord a, b;
    a.step = 0;
    b.step = 10;
    b.icl_acc = 0.7;
    write("m.csv", std::string(kMetricsHeader) + "\n" + format_metric_row(a) + format_metric_row(b));
    const auto out = run("plot '" + path("m.csv") + "' --out '" + path("m.svg") + "'");
    ASSERT_EQ(out.code, 0) << out.output;
    const std::string svg = slurp(path("m.svg"));
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    std::size_t polylines = 0;
    for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) {
        ++polylines;
    }
    EXPECT_EQ(polylines, 8u);
    for (const char* col : {"train_acc", "icl_acc", "iwl_acc", "flipped_icl_acc", "flipped_iwl_rate", "iwl_copy_acc",
                            "train_loss", "train_loss_total"}) {
        EXPECT_NE(svg.find(col), std::string::npos) << col;
    }
}

TEST_F(Cli, MalformedCsvAndMissingFilesAreIoErrors) {
    write("bad.csv", std::string(kMetricsHeader) + "\n0,1,1,0,0.5,0,0,0,0,0\n10,1,1,0,oops,0,0,0,0,0\n");
    const auto bad = run("analyze '" + path("bad.csv") + "'");
    EXPECT_EQ(bad.code, 4) << bad.output;
    EXPECT_NE(bad.output.find("bad.csv:3"), std::string::npos) << bad.output;

    EXPECT_EQ(run("analyze '" + path("missing.csv") + "'").code, 4);
    EXPECT_EQ(run("plot '" + path("missing.csv") + "' --out '" + path("x.svg") + "'").code, 4);
    EXPECT_EQ(run("train '" + path("missing.cfg") + "' --out '" + path("run") + "'").code, 4);
    EXPECT_EQ(run("cluster-embeddings --input '" + path("missing.emb") + "' --preset 1600x10 --out '" +
                  path("x.icllib") + "'")
                  .code,
              4);
}

TEST_F(Cli, CountSequencesAndUsageErrors) {
    const auto out = run("count-sequences --classes 1600 --exemplars 20");
    ASSERT_EQ(out.code, 0) << out.output;
    EXPECT_NE(out.output.find("approx 1.87"), std::string::npos) << out.output;
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("--version").code, 0);
}

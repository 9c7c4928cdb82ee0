#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <meshrecover/tensor_io.hpp>

namespace fs = std::filesystem;

namespace {

std::string bin() {
    const char* b = std::getenv("MESHRECOVER_BIN");
    REQUIRE(b != nullptr);
    return b;
}

struct RunResult {
    int code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string out_file = (fs::temp_directory_path() / "mr_cli_out.txt").string();
    const std::string cmd = bin() + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
#ifdef _WIN32
    r.code = status;
#else
    r.code = WEXITSTATUS(status);
#endif
    std::ifstream f(out_file);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

std::string fresh_dir(const char* name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::vector<std::uint8_t> slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("help and docs exit cleanly") {
    REQUIRE(run("--help").code == 0);
    const RunResult docs = run("docs");
    REQUIRE(docs.code == 0);
    REQUIRE(docs.output.find("gen-data") != std::string::npos);
    REQUIRE(docs.output.find("sweep-noise") != std::string::npos);
}

TEST_CASE("unknown flags and unknown config keys are config errors") {
    REQUIRE(run("eval --no-such-flag").code == 1);

    const std::string dir = fresh_dir("mr_cli_cfg");
    {
        std::ofstream f(dir + "/bad.json");
        f << R"({"train": {"steps": 5, "warup_fraction": 0.1}})";
    }
    const RunResult r = run("train --config " + dir + "/bad.json --data " + dir + " --out " + dir);
    REQUIRE(r.code == 1);
    REQUIRE(r.output.find("unknown key") != std::string::npos);
}

TEST_CASE("full pipeline: template, poses, data, train, eval, infer, sweep") {
    const std::string root = fresh_dir("mr_cli_pipe");
    const std::string tdir = root + "/template";
    const std::string poses = root + "/poses";
    const std::string data = root + "/data";
    const std::string ckpt = root + "/ckpt";

    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);
    REQUIRE(run("make-poses --template " + tdir + " --out " + poses + " --count 4 --seed 3").code == 0);

    // Small config: tiny model, few steps.
    const std::string cfg = root + "/cfg.json";
    {
        std::ofstream f(cfg);
        f << R"({"model": {"dim": 8, "heads": 2, "blocks": 2},
                 "train": {"steps": 8, "batch_size": 4, "checkpoint_every": 0}})";
    }
    REQUIRE(run("gen-data --meshes " + poses + " --template " + tdir + " --out " + data +
                " --config " + cfg + " --seed 5").code == 0);
    REQUIRE(fs::exists(data + "/manifest.json"));
    REQUIRE(fs::exists(data + "/template/mesh.obj"));

    REQUIRE(run("train --config " + cfg + " --data " + data + " --out " + ckpt).code == 0);
    REQUIRE(fs::exists(ckpt + "/ckpt_final.tens"));
    REQUIRE(fs::exists(ckpt + "/metrics.jsonl"));

    const RunResult ev = run("eval --ckpt " + ckpt + "/ckpt_final --data " + data + " --report " +
                             root + "/report.json --dump-obj " + root + "/dump");
    REQUIRE(ev.code == 0);
    REQUIRE(fs::exists(root + "/report.json"));
    REQUIRE(fs::exists(root + "/dump/sample_000_pred.obj"));

    // Render the rest pose, match it, then infer from both input kinds.
    REQUIRE(run("render --template " + tdir + " --out " + root + "/frame").code == 0);
    REQUIRE(run("match --frame " + root + "/frame --template " + tdir + " --eps 0.02 --out " +
                root + "/partial.tens").code == 0);
    REQUIRE(run("infer --input " + root + "/partial.tens --ckpt " + ckpt + "/ckpt_final" +
                " --template " + tdir + " --out " + root + "/pred.obj --stats " + root +
                "/stats.json").code == 0);
    REQUIRE(fs::exists(root + "/pred.obj"));
    REQUIRE(fs::exists(root + "/pred.obj.visibility.tens"));
    REQUIRE(run("infer --input " + root + "/frame --ckpt " + ckpt + "/ckpt_final --template " +
                tdir + " --out " + root + "/pred2.obj --eps 0.02").code == 0);

    const RunResult sweep = run("sweep-noise --ckpt " + ckpt + "/ckpt_final --data " + data +
                                " --stds 0,10 --report " + root + "/sweep.json");
    REQUIRE(sweep.code == 0);
    REQUIRE(fs::exists(root + "/sweep.json"));
}

TEST_CASE("gen-data on an empty directory is a degenerate-input error") {
    const std::string root = fresh_dir("mr_cli_empty");
    const std::string tdir = root + "/template";
    fs::create_directories(root + "/nothing");
    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);
    const RunResult r =
        run("gen-data --meshes " + root + "/nothing --template " + tdir + " --out " + root + "/d");
    REQUIRE(r.code == 2);
    REQUIRE(r.output.find("no meshes") != std::string::npos);
}

TEST_CASE("gen-data is bit-identical across reruns with the same seed") {
    const std::string root = fresh_dir("mr_cli_det");
    const std::string tdir = root + "/template";
    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);
    REQUIRE(run("make-poses --template " + tdir + " --out " + root + "/poses --count 3 --seed 9")
                .code == 0);
    REQUIRE(run("gen-data --meshes " + root + "/poses --template " + tdir + " --out " + root +
                "/d1 --seed 11").code == 0);
    REQUIRE(run("gen-data --meshes " + root + "/poses --template " + tdir + " --out " + root +
                "/d2 --seed 11").code == 0);
    for (const auto& e : fs::directory_iterator(root + "/d1")) {
        if (e.is_directory()) continue;
        const std::string name = e.path().filename().string();
        REQUIRE(slurp_file(root + "/d1/" + name) == slurp_file(root + "/d2/" + name));
    }
}

TEST_CASE("malformed tensor input exits with the format code and a byte offset") {
    const std::string root = fresh_dir("mr_cli_badtens");
    const std::string tdir = root + "/template";
    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);
    {
        std::ofstream f(root + "/garbage.tens", std::ios::binary);
        f << "MRTENS01";  // magic only, then truncation
    }
    // The frame loader also wants a sidecar; the tensor error must win first.
    const RunResult r = run("match --frame " + root + "/garbage --template " + tdir + " --out " +
                            root + "/p.tens");
    REQUIRE(r.code == 3);
    REQUIRE(r.output.find("byte offset") != std::string::npos);
}

TEST_CASE("all-masked partial input is a degenerate-input error") {
    const std::string root = fresh_dir("mr_cli_degen");
    const std::string tdir = root + "/template";
    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);
    // Train a throwaway checkpoint quickly.
    REQUIRE(run("make-poses --template " + tdir + " --out " + root + "/poses --count 2 --seed 1")
                .code == 0);
    const std::string cfg = root + "/cfg.json";
    {
        std::ofstream f(cfg);
        f << R"({"model": {"dim": 8, "heads": 2, "blocks": 1},
                 "train": {"steps": 2, "batch_size": 2, "checkpoint_every": 0}})";
    }
    REQUIRE(run("gen-data --meshes " + root + "/poses --template " + tdir + " --out " + root +
                "/data --config " + cfg).code == 0);
    REQUIRE(run("train --config " + cfg + " --data " + root + "/data --out " + root + "/ckpt")
                .code == 0);

    // 24 vertices, every one masked out.
    {
        using namespace meshrecover;
        std::vector<NamedTensor> entries;
        entries.push_back({"vertices", Tensor<float>({24, 3})});
        entries.push_back({"mask", Tensor<std::uint8_t>({24})});
        save_archive(root + "/allmasked.tens", entries);
    }
    const RunResult r = run("infer --input " + root + "/allmasked.tens --ckpt " + root +
                            "/ckpt/ckpt_final --template " + tdir + " --out " + root + "/o.obj");
    REQUIRE(r.code == 2);
    REQUIRE(r.output.find("degenerate") != std::string::npos);
}

TEST_CASE("selfcheck passes on a fresh template and fails on a corrupted one") {
    const std::string root = fresh_dir("mr_cli_self");
    const std::string tdir = root + "/template";
    REQUIRE(run("make-template --out " + tdir + " --rows 4 --cols 6").code == 0);

    // Corrupt the downsample operator; selfcheck must name the invariant.
    {
        using namespace meshrecover;
        Tensor<float> d = load_tensor_as<float>(tdir + "/downsample.mat");
        d.at(0, 0) += 0.5f;
        save_tensor(tdir + "/downsample.mat", d);
    }
    const RunResult r = run("selfcheck --template " + tdir);
    REQUIRE(r.code != 0);
    REQUIRE(r.output.find("[FAIL] template invariants") != std::string::npos);
    REQUIRE(r.output.find("sums to") != std::string::npos);
}

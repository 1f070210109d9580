#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cdiff/checkpoint.hpp"
#include "cdiff/config.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cdiff_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    REQUIRE(out);
    out << text;
}

}  // namespace

TEST_CASE("config json round trip preserves every field") {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.corpus.images_per_category = 20;
    c.corpus.seed = 5;
    c.corpus.categories = {"bar", "dotted bar"};
    c.model.lora_rank = 8;
    c.model.lora_alpha = 16.f;
    c.train.mode = "fdala";
    c.train.lr_unet = 2e-4f;
    c.sampler.guidance_scale = 3.5f;
    c.sampler.t_threshold = 9;
    c.headnoun.use_external = true;
    c.eval.bootstrap_resamples = 123;

    nlohmann::json j = experiment_config_to_json(c);
    ExperimentConfig back = ExperimentConfig::defaults();
    merge_experiment_config(back, j);
    REQUIRE(experiment_config_to_json(back) == j);
    REQUIRE(back.corpus.images_per_category == 20);
    REQUIRE(back.model.lora_alpha == 16.f);
    REQUIRE(back.train.mode == "fdala");
    REQUIRE(back.sampler.t_threshold == 9);
    REQUIRE(back.eval.bootstrap_resamples == 123);
}

TEST_CASE("partial configs override only what they mention") {
    ExperimentConfig c = ExperimentConfig::defaults();
    merge_experiment_config(c, nlohmann::json::parse(R"({"train": {"epochs": 3}})"));
    REQUIRE(c.train.epochs == 3);
    REQUIRE(c.train.mode == "baseline");              // untouched default
    REQUIRE(c.model.d_model == 64);                   // untouched section
    REQUIRE(c.sampler.num_inference_steps == 50);     // untouched section
}

TEST_CASE("unknown keys are rejected loudly") {
    ExperimentConfig c = ExperimentConfig::defaults();
    REQUIRE_THROWS(merge_experiment_config(c, nlohmann::json::parse(R"({"trian": {}})")));
    REQUIRE_THROWS(
        merge_experiment_config(c, nlohmann::json::parse(R"({"train": {"eopchs": 3}})")));
    REQUIRE_THROWS(merge_experiment_config(
        c, nlohmann::json::parse(R"({"sampler": {"guidance": 1.0}})")));
}

TEST_CASE("config file loading reports bad files") {
    fs::path dir = fresh_dir("cfgload");
    write_text(dir / "ok.json", R"({"train": {"epochs": 2}})");
    ExperimentConfig c = load_experiment_config((dir / "ok.json").string());
    REQUIRE(c.train.epochs == 2);
    write_text(dir / "bad.json", "{nope");
    REQUIRE_THROWS(load_experiment_config((dir / "bad.json").string()));
    REQUIRE_THROWS(load_experiment_config((dir / "absent.json").string()));
}

TEST_CASE("home directory honours the environment variable") {
    setenv(kHomeEnvVar, "/tmp/cdiff_home_test", 1);
    REQUIRE(ExperimentConfig::defaults().home == "/tmp/cdiff_home_test");
    unsetenv(kHomeEnvVar);
    REQUIRE(ExperimentConfig::defaults().home == "runs");
}

TEST_CASE("config hash tracks data and architecture but not training knobs") {
    ExperimentConfig a = ExperimentConfig::defaults();
    std::string h0 = experiment_config_hash(a);

    ExperimentConfig b = a;
    b.train.lr_unet *= 2;
    b.train.mode = "fdala";
    b.sampler.guidance_scale = 1.0f;
    b.eval.seed = 1;
    REQUIRE(experiment_config_hash(b) == h0);  // run knobs do not change identity

    ExperimentConfig c = a;
    c.corpus.seed += 1;
    REQUIRE(experiment_config_hash(c) != h0);

    ExperimentConfig d = a;
    d.model.lora_rank = 8;
    REQUIRE(experiment_config_hash(d) != h0);
}

TEST_CASE("effective config lands next to the artifacts") {
    fs::path dir = fresh_dir("cfgout");
    ExperimentConfig c = ExperimentConfig::defaults();
    write_effective_config(dir.string(), c, {{"note", "unit-test"}});
    std::ifstream in(dir / "effective_config.json");
    REQUIRE(in);
    nlohmann::json j;
    in >> j;
    REQUIRE(j.at("note") == "unit-test");
    REQUIRE(j.at("config_hash") == experiment_config_hash(c));
    REQUIRE(j.contains("corpus"));
    REQUIRE(j.contains("sampler"));
}

TEST_CASE("checkpoints round trip bit-exactly") {
    fs::path dir = fresh_dir("ckpt");
    Rng rng(77);
    ParamStoreT<float> store;
    store.create("b.weight", randn<float>({3, 5}, rng));
    store.create("a.bias", randn<float>({7}, rng));
    store.create("zz.lora.A", randn<float>({5, 2}, rng));
    store.get("zz.lora.A").trainable = true;

    CheckpointMeta meta;
    meta.config_echo = {{"purpose", "test"}};
    meta.schedule = {{"t_train", 10}};
    meta.rng_state = "0102";
    meta.step = 42;
    save_checkpoint(dir.string(), store, meta);
    REQUIRE(checkpoint_exists(dir.string()));

    // same shapes, different values: loading must restore the exact bytes
    Rng rng2(78);
    ParamStoreT<float> other;
    other.create("b.weight", randn<float>({3, 5}, rng2));
    other.create("a.bias", randn<float>({7}, rng2));
    other.create("zz.lora.A", randn<float>({5, 2}, rng2));
    CheckpointMeta back = load_checkpoint(dir.string(), other);
    REQUIRE(back.step == 42);
    REQUIRE(back.rng_state == "0102");
    REQUIRE(back.config_echo.at("purpose") == "test");
    for (const auto& name : store.names()) {
        const auto& x = store.get(name).value;
        const auto& y = other.get(name).value;
        REQUIRE(x.shape == y.shape);
        for (int64_t i = 0; i < x.numel(); i++)
            REQUIRE(std::memcmp(&x.data[(size_t)i], &y.data[(size_t)i], sizeof(float)) == 0);
    }
}

TEST_CASE("checkpoint loading validates strictly") {
    fs::path dir = fresh_dir("ckptbad");
    Rng rng(79);
    ParamStoreT<float> store;
    store.create("w1", randn<float>({4, 4}, rng));
    store.create("w2", randn<float>({2}, rng));
    save_checkpoint(dir.string(), store, {});

    SECTION("missing checkpoint") {
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        s2.create("w2", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint((dir / "nope").string(), s2));
        REQUIRE_FALSE(checkpoint_exists((dir / "nope").string()));
    }
    SECTION("name set mismatch") {
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        s2.create("w3", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
    SECTION("tensor count mismatch") {
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
    SECTION("shape mismatch") {
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({2, 8}));
        s2.create("w2", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
    SECTION("tampered offsets") {
        nlohmann::json m;
        {
            std::ifstream in(dir / "manifest.json");
            in >> m;
        }
        m["tensors"][1]["offset"] = 4;
        write_text(dir / "manifest.json", m.dump());
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        s2.create("w2", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
    SECTION("truncated blob") {
        fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 4);
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        s2.create("w2", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
    SECTION("trailing bytes in the blob") {
        std::ofstream app(dir / "weights.bin", std::ios::binary | std::ios::app);
        float junk = 1.f;
        app.write(reinterpret_cast<const char*>(&junk), sizeof junk);
        app.close();
        ParamStoreT<float> s2;
        s2.create("w1", Tensor({4, 4}));
        s2.create("w2", Tensor({2}));
        REQUIRE_THROWS(load_checkpoint(dir.string(), s2));
    }
}

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdiff/schedule.hpp"
#include "cdiff/synth.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

inline constexpr const char* kHomeEnvVar = "COMPOUND_DIFFUSION_HOME";

struct ModelConfig {
    int d_model = 64;
    int text_blocks = 2;
    int text_heads = 4;
    int unet_base_ch = 32;
    int unet_mid_ch = 64;
    int unet_heads = 4;
    int vision_patch = 8;
    int lora_rank = 4;
    float lora_alpha = 8.f;
    int t_train = 1000;
    uint64_t init_seed = 1234;
};

struct PretrainConfig {
    int epochs = 12;
    int batch = 16;
    float lr = 1e-3f;
    float temperature = 0.07f;
    uint64_t seed = 31;
};

struct TrainConfig {
    std::string mode = "baseline";  // "baseline" or "fdala"
    int batch = 8;
    int epochs = 30;
    float lr_unet = 1e-4f;
    float lr_text = 1e-5f;
    float weight_decay = 1e-3f;
    float prompt_dropout = 0.1f;
    bool use_align = true;  // fdala only: disable to train adapters on reconstruction alone
    int keep_checkpoints = 3;
    uint64_t seed = 7;
};

struct HeadNounConfig {
    bool use_external = false;
    std::string endpoint;
    std::string bearer_token_env = "HEADNOUN_API_TOKEN";
    int timeout_seconds = 10;
    int retries = 2;
};

struct EvalConfig {
    int bootstrap_resamples = 10000;
    int detector_epochs = 30;
    uint64_t seed = 97;
};

struct ExperimentConfig {
    std::string home;  // artifact root; default $COMPOUND_DIFFUSION_HOME or ./runs
    CorpusConfig corpus;
    ModelConfig model;
    PretrainConfig pretrain;
    TrainConfig train;
    SamplerConfig sampler;
    HeadNounConfig headnoun;
    EvalConfig eval;

    static ExperimentConfig defaults() {
        ExperimentConfig c;
        if (const char* env = std::getenv(kHomeEnvVar); env && *env)
            c.home = env;
        else
            c.home = "runs";
        return c;
    }
};

namespace detail {

// Strict section merge: every present key overrides; unknown keys are errors.
class JsonMerger {
  public:
    JsonMerger(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) fail("config", where_ + " must be a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it) unused_.insert(it.key());
    }
    template <typename T>
    void field(const char* key, T& target) {
        if (!j_.contains(key)) return;
        unused_.erase(key);
        try {
            target = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            fail("config", where_ + "." + key + ": " + e.what());
        }
    }
    nlohmann::json take(const char* key) {
        unused_.erase(key);
        return j_.contains(key) ? j_.at(key) : nlohmann::json();
    }
    void finish() const {
        if (!unused_.empty()) fail("config", "unknown key '" + *unused_.begin() + "' in " + where_);
    }

  private:
    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> unused_;
};

}  // namespace detail

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["home"] = c.home;
    j["corpus"] = corpus_config_to_json(c.corpus);
    j["model"] = {{"d_model", c.model.d_model},
                  {"text_blocks", c.model.text_blocks},
                  {"text_heads", c.model.text_heads},
                  {"unet_base_ch", c.model.unet_base_ch},
                  {"unet_mid_ch", c.model.unet_mid_ch},
                  {"unet_heads", c.model.unet_heads},
                  {"vision_patch", c.model.vision_patch},
                  {"lora_rank", c.model.lora_rank},
                  {"lora_alpha", c.model.lora_alpha},
                  {"t_train", c.model.t_train},
                  {"init_seed", c.model.init_seed}};
    j["pretrain"] = {{"epochs", c.pretrain.epochs},
                     {"batch", c.pretrain.batch},
                     {"lr", c.pretrain.lr},
                     {"temperature", c.pretrain.temperature},
                     {"seed", c.pretrain.seed}};
    j["train"] = {{"mode", c.train.mode},
                  {"batch", c.train.batch},
                  {"epochs", c.train.epochs},
                  {"lr_unet", c.train.lr_unet},
                  {"lr_text", c.train.lr_text},
                  {"weight_decay", c.train.weight_decay},
                  {"prompt_dropout", c.train.prompt_dropout},
                  {"use_align", c.train.use_align},
                  {"keep_checkpoints", c.train.keep_checkpoints},
                  {"seed", c.train.seed}};
    j["sampler"] = {{"steps", c.sampler.num_inference_steps},
                    {"guidance_scale", c.sampler.guidance_scale},
                    {"t_threshold", c.sampler.t_threshold},
                    {"guidance_mode", guidance_mode_str(c.sampler.guidance_mode)},
                    {"seed", c.sampler.seed}};
    j["headnoun"] = {{"use_external", c.headnoun.use_external},
                     {"endpoint", c.headnoun.endpoint},
                     {"bearer_token_env", c.headnoun.bearer_token_env},
                     {"timeout_seconds", c.headnoun.timeout_seconds},
                     {"retries", c.headnoun.retries}};
    j["eval"] = {{"bootstrap_resamples", c.eval.bootstrap_resamples},
                 {"detector_epochs", c.eval.detector_epochs},
                 {"seed", c.eval.seed}};
    return j;
}

inline void merge_experiment_config(ExperimentConfig& c, const nlohmann::json& j) {
    detail::JsonMerger top(j, "config");
    top.field("home", c.home);
    if (auto sec = top.take("corpus"); !sec.is_null()) {
        detail::JsonMerger m(sec, "corpus");
        m.field("image_size", c.corpus.image_size);
        m.field("images_per_category", c.corpus.images_per_category);
        m.field("compound_scarcity", c.corpus.compound_scarcity);
        m.field("test_fraction", c.corpus.test_fraction);
        m.field("seed", c.corpus.seed);
        m.field("categories", c.corpus.categories);
        if (sec.contains("confusable_pairs")) {
            c.corpus.confusable_pairs.clear();
            for (const auto& p : m.take("confusable_pairs"))
                c.corpus.confusable_pairs.emplace_back(p.at(0).get<std::string>(),
                                                       p.at(1).get<std::string>());
        }
        m.finish();
    }
    if (auto sec = top.take("model"); !sec.is_null()) {
        detail::JsonMerger m(sec, "model");
        m.field("d_model", c.model.d_model);
        m.field("text_blocks", c.model.text_blocks);
        m.field("text_heads", c.model.text_heads);
        m.field("unet_base_ch", c.model.unet_base_ch);
        m.field("unet_mid_ch", c.model.unet_mid_ch);
        m.field("unet_heads", c.model.unet_heads);
        m.field("vision_patch", c.model.vision_patch);
        m.field("lora_rank", c.model.lora_rank);
        m.field("lora_alpha", c.model.lora_alpha);
        m.field("t_train", c.model.t_train);
        m.field("init_seed", c.model.init_seed);
        m.finish();
    }
    if (auto sec = top.take("pretrain"); !sec.is_null()) {
        detail::JsonMerger m(sec, "pretrain");
        m.field("epochs", c.pretrain.epochs);
        m.field("batch", c.pretrain.batch);
        m.field("lr", c.pretrain.lr);
        m.field("temperature", c.pretrain.temperature);
        m.field("seed", c.pretrain.seed);
        m.finish();
    }
    if (auto sec = top.take("train"); !sec.is_null()) {
        detail::JsonMerger m(sec, "train");
        m.field("mode", c.train.mode);
        m.field("batch", c.train.batch);
        m.field("epochs", c.train.epochs);
        m.field("lr_unet", c.train.lr_unet);
        m.field("lr_text", c.train.lr_text);
        m.field("weight_decay", c.train.weight_decay);
        m.field("prompt_dropout", c.train.prompt_dropout);
        m.field("use_align", c.train.use_align);
        m.field("keep_checkpoints", c.train.keep_checkpoints);
        m.field("seed", c.train.seed);
        m.finish();
    }
    if (auto sec = top.take("sampler"); !sec.is_null()) {
        detail::JsonMerger m(sec, "sampler");
        m.field("steps", c.sampler.num_inference_steps);
        m.field("guidance_scale", c.sampler.guidance_scale);
        m.field("t_threshold", c.sampler.t_threshold);
        std::string mode = guidance_mode_str(c.sampler.guidance_mode);
        m.field("guidance_mode", mode);
        c.sampler.guidance_mode = parse_guidance_mode(mode);
        m.field("seed", c.sampler.seed);
        m.finish();
    }
    if (auto sec = top.take("headnoun"); !sec.is_null()) {
        detail::JsonMerger m(sec, "headnoun");
        m.field("use_external", c.headnoun.use_external);
        m.field("endpoint", c.headnoun.endpoint);
        m.field("bearer_token_env", c.headnoun.bearer_token_env);
        m.field("timeout_seconds", c.headnoun.timeout_seconds);
        m.field("retries", c.headnoun.retries);
        m.finish();
    }
    if (auto sec = top.take("eval"); !sec.is_null()) {
        detail::JsonMerger m(sec, "eval");
        m.field("bootstrap_resamples", c.eval.bootstrap_resamples);
        m.field("detector_epochs", c.eval.detector_epochs);
        m.field("seed", c.eval.seed);
        m.finish();
    }
    top.finish();
}

// defaults, overlaid by an optional JSON file; CLI flags are applied on top
// by the caller.
inline ExperimentConfig load_experiment_config(const std::string& config_path) {
    ExperimentConfig c = ExperimentConfig::defaults();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) fail("config", "cannot read config file " + config_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            fail("config", std::string("config file is not valid JSON: ") + e.what());
        }
        merge_experiment_config(c, j);
    }
    return c;
}

// Hash over the sections that define a training run; used to reject resumes
// and fine-tune initializations under a different recipe.
inline std::string experiment_config_hash(const ExperimentConfig& c) {
    nlohmann::json j = experiment_config_to_json(c);
    nlohmann::json key{{"corpus", j["corpus"]}, {"model", j["model"]}};
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx",
                  (unsigned long long)hash64_str(key.dump()));
    return hex;
}

inline void write_effective_config(const std::string& dir, const ExperimentConfig& c,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j = experiment_config_to_json(c);
    j["config_hash"] = experiment_config_hash(c);
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(fs::path(dir) / "effective_config.json");
    if (!out) fail("io", "cannot write effective_config.json under " + dir);
    out << j.dump(2) << "\n";
}

}  // namespace cdiff

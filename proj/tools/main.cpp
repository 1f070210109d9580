// compound-diffusion: command-line front end for the compound-category
// diffusion laboratory. Subcommands cover the whole experiment pipeline:
//
//   gen-data           render the synthetic corpus
//   pretrain-encoders  contrastive image/text encoder pretraining
//   train              diffusion training (baseline or fdala adapters)
//   sample             guided reverse-diffusion sampling to PNG
//   eval               detector-based metrics over a directory of images
//   attn               sample one image while exporting attention maps
//   head-noun          resolve category head nouns and negative prompts
//
// Every error leaves on stderr as a single "E_<CODE>: message" line with a
// nonzero exit code, and every command that writes artifacts drops an
// effective_config.json snapshot beside them.

#include <CLI11.hpp>

#include <cctype>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cdiff/cdiff.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

// Options every subcommand honors.
struct GlobalOpts {
    std::string config_path;
    std::string home;
    std::string out;
    std::optional<int64_t> seed;
    bool quiet = false;
};

// Duplicates a stream into two sinks so run logs land on disk and on the
// console at the same time.
class TeeBuf : public std::streambuf {
  public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

  protected:
    int overflow(int c) override {
        if (c == EOF) return EOF;
        int ra = a_ ? a_->sputc((char)c) : c;
        int rb = b_ ? b_->sputc((char)c) : c;
        return (ra == EOF || rb == EOF) ? EOF : c;
    }
    int sync() override {
        int ra = a_ ? a_->pubsync() : 0;
        int rb = b_ ? b_->pubsync() : 0;
        return (ra == 0 && rb == 0) ? 0 : -1;
    }

  private:
    std::streambuf* a_;
    std::streambuf* b_;
};

// Run log writing to <dir>/<name> and, unless quieted, to stdout.
class RunLog {
  public:
    RunLog(const std::string& dir, const std::string& name, bool quiet, bool append = false)
        : file_((fs::path(dir) / name).string(),
                append ? std::ios::app : std::ios::trunc),
          tee_(file_.rdbuf(), quiet ? nullptr : std::cout.rdbuf()),
          os_(&tee_) {
        if (!file_) cdiff::fail("io", "cannot write log file under " + dir);
    }
    std::ostream& stream() { return os_; }

  private:
    std::ofstream file_;
    TeeBuf tee_;
    std::ostream os_;
};

std::string timestamp_utc() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return buf;
}

// Per-run output directory under home: "<stem>-<timestamp>", suffixed with a
// counter if the same second already produced one.
std::string fresh_run_dir(const std::string& home, const std::string& stem) {
    std::string base = (fs::path(home) / (stem + "-" + timestamp_utc())).string();
    std::string dir = base;
    int n = 2;
    while (fs::exists(dir)) dir = base + "-" + std::to_string(n++);
    fs::create_directories(dir);
    return dir;
}

std::string ensure_dir(const std::string& dir) {
    fs::create_directories(dir);
    return dir;
}

// Defaults, overlaid by the optional config file, then the global flags.
cdiff::ExperimentConfig base_config(const GlobalOpts& g) {
    cdiff::ExperimentConfig cfg = cdiff::load_experiment_config(g.config_path);
    if (!g.home.empty()) cfg.home = g.home;
    if (g.seed) {
        uint64_t s = (uint64_t)*g.seed;
        cfg.corpus.seed = s;
        cfg.pretrain.seed = s;
        cfg.train.seed = s;
        cfg.sampler.seed = s;
        cfg.eval.seed = s;
    }
    return cfg;
}

json read_checkpoint_manifest(const std::string& dir) {
    fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) cdiff::fail("checkpoint", "no checkpoint manifest under " + dir);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        cdiff::fail("checkpoint", "unreadable checkpoint manifest under " + dir + ": " + e.what());
    }
    return j;
}

// Rebuild the experiment config a checkpoint was produced under, then let the
// config file and global flags override the non-identity sections.
cdiff::ExperimentConfig config_from_checkpoint(const std::string& ckpt_dir, const GlobalOpts& g) {
    json manifest = read_checkpoint_manifest(ckpt_dir);
    if (!manifest.contains("config"))
        cdiff::fail("checkpoint", "checkpoint manifest lacks a config echo: " + ckpt_dir);
    json echo = manifest["config"];
    echo.erase("config_hash");
    cdiff::ExperimentConfig cfg = cdiff::ExperimentConfig::defaults();
    cdiff::merge_experiment_config(cfg, echo);
    if (!g.config_path.empty()) {
        std::ifstream in(g.config_path);
        if (!in) cdiff::fail("config", "cannot read config file " + g.config_path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            cdiff::fail("config", std::string("config file is not valid JSON: ") + e.what());
        }
        cdiff::merge_experiment_config(cfg, j);
    }
    if (!g.home.empty()) cfg.home = g.home;
    if (g.seed) cfg.sampler.seed = (uint64_t)*g.seed;
    return cfg;
}

// The recipe hash a checkpoint claims, for identity checks before any tensor
// is read.
std::string checkpoint_hash(const std::string& dir) {
    json manifest = read_checkpoint_manifest(dir);
    if (manifest.contains("config") && manifest["config"].contains("config_hash"))
        return manifest["config"]["config_hash"].get<std::string>();
    return "";
}

void require_matching_recipe(const cdiff::ExperimentConfig& cfg, const std::string& ckpt_dir,
                             const std::string& what) {
    std::string want = cdiff::experiment_config_hash(cfg);
    std::string got = checkpoint_hash(ckpt_dir);
    if (got != want)
        cdiff::fail("config", what + " checkpoint at " + ckpt_dir + " has recipe hash " +
                                  (got.empty() ? "<missing>" : got) +
                                  " but the current corpus+model hash to " + want);
}

cdiff::CheckpointMeta make_meta(const cdiff::ExperimentConfig& cfg, const cdiff::ModelBundle& m,
                                uint64_t rng_seed, int64_t step) {
    cdiff::CheckpointMeta meta;
    meta.config_echo = cdiff::experiment_config_to_json(cfg);
    meta.config_echo["config_hash"] = cdiff::experiment_config_hash(cfg);
    meta.schedule = {{"t_train", m.sched.t_train},
                     {"beta_start", m.sched.betas.front()},
                     {"beta_end", m.sched.betas.back()}};
    meta.rng_state = cdiff::Rng(rng_seed).state_str();
    meta.step = step;
    return meta;
}

std::vector<std::string> unknown_words(const cdiff::Vocabulary& vocab, const std::string& text) {
    std::vector<std::string> unk;
    for (const auto& w : cdiff::split_words(cdiff::lowercase(text)))
        if (vocab.id(w) == cdiff::kUnkId) unk.push_back(w);
    return unk;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (const auto& p : parts) {
        if (!out.empty()) out += sep;
        out += p;
    }
    return out;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOpts {};

void cmd_gen_data(const GlobalOpts& g) {
    cdiff::ExperimentConfig cfg = base_config(g);
    if (g.out.empty())
        cdiff::fail("usage", "gen-data needs an output directory: --out DIR");
    const std::string out = g.out;

    json manifest = cdiff::make_corpus(out, cdiff::Lexicon{}, cfg.corpus);
    cfg.corpus = cdiff::corpus_config_from_json(manifest.at("config"));
    cdiff::write_effective_config(out, cfg,
                                  {{"command", "gen-data"},
                                   {"corpus_checksum", manifest.at("corpus_checksum")}});

    std::cout << "corpus at " << out << "\n";
    std::cout << "categories " << cfg.corpus.categories.size() << "  images "
              << manifest.at("total_images").get<int64_t>() << "  checksum "
              << manifest.at("corpus_checksum").get<std::string>() << "\n";
    for (auto it = manifest.at("counts").begin(); it != manifest.at("counts").end(); ++it)
        std::cout << "  " << it.key() << ": train " << it.value().at("train").get<int>()
                  << "  test " << it.value().at("test").get<int>() << "\n";
}

// ---------------------------------------------------------------------------
// pretrain-encoders
// ---------------------------------------------------------------------------

struct PretrainOpts {
    std::string corpus;
    std::optional<int> epochs;
};

void cmd_pretrain(const GlobalOpts& g, const PretrainOpts& o) {
    cdiff::ExperimentConfig cfg = base_config(g);
    if (o.epochs) cfg.pretrain.epochs = *o.epochs;

    cdiff::LoadedCorpus corpus = cdiff::LoadedCorpus::load(o.corpus);
    cfg.corpus = corpus.config;  // the data on disk defines the corpus recipe

    std::string out = g.out.empty() ? ensure_dir((fs::path(cfg.home) / "encoders").string())
                                    : ensure_dir(g.out);
    RunLog log(out, "pretrain.log", g.quiet);

    cdiff::ModelBundle m;
    m.init(cfg, corpus.lexicon);
    cdiff::EncoderPretrainer pre(m, corpus, &log.stream());
    cdiff::PretrainStats stats = pre.run();

    std::string ckpt = (fs::path(out) / "final").string();
    cdiff::save_checkpoint(ckpt, m.store, make_meta(cfg, m, cfg.pretrain.seed, stats.steps));
    cdiff::write_effective_config(
        out, cfg,
        {{"command", "pretrain-encoders"},
         {"corpus_dir", o.corpus},
         {"corpus_checksum", corpus.manifest.at("corpus_checksum")},
         {"final_checkpoint", ckpt},
         {"holdout_top1_before", stats.initial_top1},
         {"holdout_top1_after", stats.final_top1}});

    char line[160];
    std::snprintf(line, sizeof line,
                  "pretraining done: %d steps, holdout top-1 %.4f -> %.4f\ncheckpoint %s\n",
                  stats.steps, stats.initial_top1, stats.final_top1, ckpt.c_str());
    std::cout << line;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string corpus;
    std::string mode;
    std::string init;
    bool resume = false;
    bool no_align = false;
    std::optional<int> epochs;
    std::optional<int64_t> max_steps;
    std::optional<int> batch;
};

// Latest epoch checkpoint under a training run directory, or -1.
int latest_epoch(const std::string& dir) {
    int best = -1;
    if (!fs::exists(dir)) return best;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        std::string name = entry.path().filename().string();
        int n = 0;
        if (std::sscanf(name.c_str(), "epoch_%d", &n) == 1 &&
            cdiff::checkpoint_exists(entry.path().string()))
            best = std::max(best, n);
    }
    return best;
}

void cmd_train(const GlobalOpts& g, const TrainOpts& o) {
    cdiff::ExperimentConfig cfg = base_config(g);
    if (!o.mode.empty()) cfg.train.mode = o.mode;
    if (o.epochs) cfg.train.epochs = *o.epochs;
    if (o.batch) cfg.train.batch = *o.batch;
    if (o.no_align) cfg.train.use_align = false;
    if (cfg.train.mode != "baseline" && cfg.train.mode != "fdala")
        cdiff::fail("train", "unknown training mode '" + cfg.train.mode + "'");

    if (o.resume && !o.init.empty())
        cdiff::fail("usage", "--resume continues from --out; it cannot be combined with --init");
    if (o.resume && g.out.empty())
        cdiff::fail("usage", "--resume needs the training directory to continue: --out DIR");
    if (!o.resume && o.init.empty()) {
        if (cfg.train.mode == "fdala")
            cdiff::fail("train", "fdala fine-tuning starts from a baseline checkpoint: --init DIR");
        cdiff::fail("train", "baseline training starts from pretrained encoders: --init DIR");
    }

    cdiff::LoadedCorpus corpus = cdiff::LoadedCorpus::load(o.corpus);
    cfg.corpus = corpus.config;

    cdiff::ModelBundle m;
    m.init(cfg, corpus.lexicon);

    int start_epoch = 0;
    std::string out;
    if (o.resume) {
        out = g.out;
        int epoch = latest_epoch(out);
        if (epoch < 0)
            cdiff::fail("train", "nothing to resume: no epoch checkpoints under " + out);
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d", epoch);
        std::string ckpt = (fs::path(out) / name).string();
        require_matching_recipe(cfg, ckpt, "resume");
        cdiff::load_checkpoint(ckpt, m.store);
        start_epoch = epoch + 1;
    } else {
        require_matching_recipe(cfg, o.init, "initial");
        cdiff::load_checkpoint(o.init, m.store);
        out = g.out.empty() ? fresh_run_dir(cfg.home, "train-" + cfg.train.mode)
                            : ensure_dir(g.out);
    }

    RunLog log(out, "train.log", g.quiet, /*append=*/o.resume);
    if (o.resume)
        log.stream() << "resuming " << cfg.train.mode << " training at epoch " << start_epoch
                     << "\n";

    cdiff::DiffusionTrainer trainer(m, corpus, out, &log.stream());
    if (o.max_steps) trainer.max_steps = *o.max_steps;
    cdiff::TrainRunResult result = trainer.run(start_epoch);

    cdiff::write_effective_config(out, cfg,
                                  {{"command", "train"},
                                   {"corpus_dir", o.corpus},
                                   {"corpus_checksum", corpus.manifest.at("corpus_checksum")},
                                   {"init_checkpoint", o.resume ? "(resumed)" : o.init},
                                   {"final_checkpoint", result.final_checkpoint},
                                   {"total_steps", result.total_steps}});

    std::cout << cfg.train.mode << " training done: " << result.total_steps << " steps\n";
    if (!result.losses.empty()) {
        const cdiff::StepLoss& last = result.losses.back();
        char line[160];
        std::snprintf(line, sizeof line, "last step l_rec %.6f l_align %.6f l_total %.6f\n",
                      last.l_rec, last.l_align, last.l_total);
        std::cout << line;
    }
    std::cout << "checkpoint " << result.final_checkpoint << "\n";
}

// ---------------------------------------------------------------------------
// sample (and the attention variant)
// ---------------------------------------------------------------------------

struct SampleOpts {
    std::string checkpoint;
    std::vector<std::string> categories;
    int count = 1;
    bool cfig = false;
    std::optional<int> t_threshold;
    std::optional<float> guidance_scale;
    std::optional<std::string> guidance_mode;
    std::optional<int> steps;
    std::optional<int64_t> seed;
    std::optional<bool> adapters;
    bool external_head = false;
    std::string endpoint;
    std::string head_cache;
    int capture_every = 0;  // attn subcommand only
};

// Loads the bundle a checkpoint was trained with; returns the effective
// config (identity sections from the checkpoint echo) and whether the run
// that produced it trained adapters.
bool load_sampling_bundle(const GlobalOpts& g, const SampleOpts& o, cdiff::ExperimentConfig& cfg,
                          cdiff::ModelBundle& m) {
    cfg = config_from_checkpoint(o.checkpoint, g);
    if (o.steps) cfg.sampler.num_inference_steps = *o.steps;
    if (o.t_threshold) cfg.sampler.t_threshold = *o.t_threshold;
    if (o.guidance_scale) cfg.sampler.guidance_scale = *o.guidance_scale;
    if (o.guidance_mode) cfg.sampler.guidance_mode = cdiff::parse_guidance_mode(*o.guidance_mode);
    if (o.seed) cfg.sampler.seed = (uint64_t)*o.seed;
    cfg.sampler.validate();

    m.init(cfg, cdiff::Lexicon{});
    cdiff::CheckpointMeta meta = cdiff::load_checkpoint(o.checkpoint, m.store);
    bool trained_with_adapters =
        meta.config_echo.contains("train") && meta.config_echo["train"].value("mode", "") == "fdala";
    return o.adapters ? *o.adapters : trained_with_adapters;
}

// Head-noun resolution for the negative prompt: rule by default, external
// endpoint when requested (with the rule as a hard fallback).
std::string resolve_head_for(const cdiff::ExperimentConfig& cfg, const SampleOpts& o,
                             const std::string& home, const std::string& category,
                             std::ostream& log) {
    if (!o.external_head && !cfg.headnoun.use_external) return "";  // sampler applies the rule
    cdiff::HeadNounResolver resolver(o.head_cache.empty()
                                         ? (fs::path(home) / "headnoun_cache.jsonl").string()
                                         : o.head_cache);
    resolver.use_external = true;
    resolver.external.endpoint = o.endpoint.empty() ? cfg.headnoun.endpoint : o.endpoint;
    resolver.external.bearer_token_env = cfg.headnoun.bearer_token_env;
    resolver.external.timeout_seconds = cfg.headnoun.timeout_seconds;
    resolver.external.retries = cfg.headnoun.retries;
    cdiff::HeadNounResult r = resolver.resolve(category, &log);
    log << "head noun for '" << category << "': " << r.head << " (" << r.source << ")\n";
    return r.head;
}

json sample_sidecar(const cdiff::ExperimentConfig& cfg, const cdiff::SampleOutput& so,
                    const std::string& category, int index, bool adapters, bool use_cfig,
                    const std::string& checkpoint) {
    json j = cdiff::experiment_config_to_json(cfg);
    j["config_hash"] = cdiff::experiment_config_hash(cfg);
    j["command"] = "sample";
    j["checkpoint"] = checkpoint;
    j["category"] = cdiff::lowercase(category);
    j["sample_index"] = index;
    j["seed"] = cfg.sampler.seed;
    j["adapters"] = adapters;
    j["cfig_requested"] = use_cfig;
    j["cfig_active"] = so.cfig_active;
    j["negative_evals"] = so.negative_evals;
    return j;
}

void cmd_sample(const GlobalOpts& g, const SampleOpts& o) {
    cdiff::ExperimentConfig cfg;
    cdiff::ModelBundle m;
    bool adapters = load_sampling_bundle(g, o, cfg, m);

    std::string out = g.out.empty() ? fresh_run_dir(cfg.home, "samples") : ensure_dir(g.out);
    RunLog log(out, "sample.log", g.quiet);
    log.stream() << "sampling from " << o.checkpoint << " (adapters "
                 << (adapters ? "on" : "off") << ", cfig " << (o.cfig ? "on" : "off") << ")\n";

    cdiff::SampleOptions opt;
    opt.sampler = cfg.sampler;
    opt.use_cfig = o.cfig;
    opt.adapters = adapters;
    opt.capture_every = o.capture_every;

    std::vector<std::string> written;
    for (const auto& category : o.categories) {
        if (auto unk = unknown_words(m.vocab, category); !unk.empty())
            cdiff::fail("sample", "category '" + category +
                                      "' uses words outside the vocabulary: " + join(unk, " "));
        opt.head_override = resolve_head_for(cfg, o, cfg.home, category, log.stream());

        for (int i = 0; i < o.count; i++) {
            cdiff::SampleOutput so = cdiff::sample_image(m, category, i, opt, &log.stream());
            char name[128];
            std::snprintf(name, sizeof name, "%s_%llu_%d",
                          cdiff::category_slug(category).c_str(),
                          (unsigned long long)cfg.sampler.seed, i);
            std::string png = (fs::path(out) / (std::string(name) + ".png")).string();
            cdiff::write_png_rgb(png, cdiff::to_u8_rgb(so.image));
            std::ofstream side((fs::path(out) / (std::string(name) + ".json")).string());
            side << sample_sidecar(cfg, so, category, i, adapters, o.cfig, o.checkpoint).dump(2)
                 << "\n";
            log.stream() << "wrote " << png << " (negative evals " << so.negative_evals << ")\n";
            written.push_back(png);

            if (o.capture_every > 0) {
                std::string maps = (fs::path(out) / (std::string(name) + "_attn")).string();
                cdiff::export_attention(maps, so.attention, so.prompt_ids, m.vocab);
                log.stream() << "attention maps for " << so.attention.size() << " steps under "
                             << maps << "\n";
            }
        }
    }

    cdiff::write_effective_config(out, cfg,
                                  {{"command", o.capture_every > 0 ? "attn" : "sample"},
                                   {"checkpoint", o.checkpoint},
                                   {"categories", o.categories},
                                   {"count", o.count},
                                   {"adapters", adapters},
                                   {"cfig", o.cfig},
                                   {"images", written}});
    std::cout << written.size() << " images under " << out << "\n";
}

void cmd_attn(const GlobalOpts& g, SampleOpts o) {
    if (o.capture_every <= 0) o.capture_every = 5;
    if (o.categories.size() != 1)
        cdiff::fail("usage", "attn renders exactly one --category");
    o.count = 1;
    cmd_sample(g, o);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string generated;
    std::string reference;
    std::string checkpoint;
    std::string split = "test";
    std::string detector_dir;
    std::optional<int> resamples;
    std::optional<int> detector_epochs;
};

// Detector trained on the reference corpus, cached beside it. A cache trained
// on different data is retrained in place.
cdiff::ObjectDetector prepare_detector(const cdiff::ExperimentConfig& cfg,
                                       const cdiff::LoadedCorpus& corpus, const std::string& dir,
                                       cdiff::ParamStoreT<float>& store, std::ostream& log) {
    cdiff::ObjectDetector det;
    det.cfg.epochs = cfg.eval.detector_epochs;
    det.cfg.seed = cfg.eval.seed;
    cdiff::Rng rng(cfg.eval.seed);
    det.init(store, corpus.lexicon, rng);

    std::string checksum = corpus.manifest.at("corpus_checksum").get<std::string>();
    if (cdiff::checkpoint_exists(dir)) {
        json manifest = read_checkpoint_manifest(dir);
        std::string cached = manifest.value("config", json::object()).value("corpus_checksum", "");
        if (cached == checksum) {
            cdiff::load_checkpoint(dir, store);
            log << "detector loaded from " << dir << "\n";
            return det;
        }
        log << "cached detector was trained on different data; retraining\n";
    }

    auto stats = det.train(store, corpus, &log);
    cdiff::CheckpointMeta meta;
    meta.config_echo = {{"corpus_checksum", checksum},
                        {"detector_epochs", det.cfg.epochs},
                        {"seed", det.cfg.seed}};
    meta.rng_state = cdiff::Rng(det.cfg.seed).state_str();
    meta.step = det.cfg.epochs;
    cdiff::save_checkpoint(dir, store, meta);
    log << "detector trained (holdout class accuracy " << stats.holdout_class_accuracy
        << ") and cached at " << dir << "\n";
    return det;
}

void cmd_eval(const GlobalOpts& g, const EvalOpts& o) {
    cdiff::LoadedCorpus corpus = cdiff::LoadedCorpus::load(o.reference);

    SampleOpts load_opts;
    load_opts.checkpoint = o.checkpoint;
    cdiff::ExperimentConfig cfg = config_from_checkpoint(o.checkpoint, g);
    if (o.resamples) cfg.eval.bootstrap_resamples = *o.resamples;
    if (o.detector_epochs) cfg.eval.detector_epochs = *o.detector_epochs;

    json ckpt_corpus = cdiff::corpus_config_to_json(cfg.corpus);
    json disk_corpus = cdiff::corpus_config_to_json(corpus.config);
    if (ckpt_corpus != disk_corpus)
        cdiff::fail("config", "checkpoint at " + o.checkpoint +
                                  " was trained on a different corpus recipe than " + o.reference);

    cdiff::ModelBundle m;
    m.init(cfg, corpus.lexicon);
    cdiff::load_checkpoint(o.checkpoint, m.store);

    std::string out = g.out.empty() ? fresh_run_dir(cfg.home, "eval") : ensure_dir(g.out);
    RunLog log(out, "eval.log", g.quiet);

    std::string det_dir = o.detector_dir.empty()
                              ? (fs::path(o.reference) / "detector").string()
                              : o.detector_dir;
    cdiff::ParamStoreT<float> det_store;
    cdiff::ObjectDetector det = prepare_detector(cfg, corpus, det_dir, det_store, log.stream());

    std::vector<cdiff::EvalImage> generated =
        cdiff::scan_eval_images(o.generated, corpus.categories());
    std::vector<cdiff::EvalImage> reference;
    for (const auto& item : corpus.items) {
        if (o.split != "all" && item.ann.split != o.split) continue;
        reference.push_back({item.path, cdiff::lowercase(item.ann.category)});
    }
    if (reference.empty())
        cdiff::fail("eval", "reference split '" + o.split + "' holds no images");
    log.stream() << "evaluating " << generated.size() << " generated images against "
                 << reference.size() << " reference images (" << o.split << " split)\n";

    cdiff::MetricsReport report =
        cdiff::run_eval(m, det, det_store, generated, reference, corpus.config.confusable_pairs,
                        cfg.eval.bootstrap_resamples, cfg.eval.seed, &log.stream());

    json rj = cdiff::metrics_report_to_json(report);
    rj["generated_dir"] = o.generated;
    rj["reference_dir"] = o.reference;
    rj["reference_split"] = o.split;
    rj["checkpoint"] = o.checkpoint;
    {
        std::ofstream jout(fs::path(out) / "report.json");
        jout << rj.dump(2) << "\n";
    }
    cdiff::write_metrics_csv((fs::path(out) / "report.csv").string(), report);
    std::string text = cdiff::metrics_report_text(report);
    {
        std::ofstream tout(fs::path(out) / "report.txt");
        tout << text;
    }
    cdiff::write_effective_config(out, cfg,
                                  {{"command", "eval"},
                                   {"generated_dir", o.generated},
                                   {"reference_dir", o.reference},
                                   {"reference_split", o.split},
                                   {"checkpoint", o.checkpoint},
                                   {"detector_dir", det_dir}});

    std::cout << text;
    std::cout << "reports under " << out << "\n";
}

// ---------------------------------------------------------------------------
// head-noun
// ---------------------------------------------------------------------------

struct HeadNounOpts {
    std::vector<std::string> categories;
    bool external = false;
    std::string endpoint;
    std::string cache;
};

void cmd_head_noun(const GlobalOpts& g, const HeadNounOpts& o) {
    cdiff::ExperimentConfig cfg = base_config(g);
    std::string cache = o.cache.empty()
                            ? (fs::path(cfg.home) / "headnoun_cache.jsonl").string()
                            : o.cache;
    ensure_dir(fs::path(cache).parent_path().string());

    cdiff::HeadNounResolver resolver(cache);
    resolver.use_external = o.external || cfg.headnoun.use_external;
    resolver.external.endpoint = o.endpoint.empty() ? cfg.headnoun.endpoint : o.endpoint;
    resolver.external.bearer_token_env = cfg.headnoun.bearer_token_env;
    resolver.external.timeout_seconds = cfg.headnoun.timeout_seconds;
    resolver.external.retries = cfg.headnoun.retries;

    for (const auto& category : o.categories) {
        cdiff::HeadNounResult r = resolver.resolve(category, &std::cerr);
        std::vector<std::string> mods;
        for (const auto& w : cdiff::split_words(cdiff::lowercase(category)))
            if (w != r.head) mods.push_back(w);
        auto neg = cdiff::build_negative_prompt(category, r.head);
        std::cout << r.category << ": head=" << r.head << " modifiers=[" << join(mods, " ")
                  << "] negative=\"" << (neg ? *neg : "") << "\" source=" << r.source << "\n";
    }
}

std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

std::string error_code(std::string code) {
    for (auto& c : code) c = (char)std::toupper((unsigned char)c);
    return code.empty() ? "INTERNAL" : code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"compound-diffusion: a desk-scale text-conditioned diffusion laboratory\n"
                 "for compound object categories (synthetic data, adapter fine-tuning,\n"
                 "gated negative-prompt guidance, detector-based evaluation)"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", "compound-diffusion 0.1.0");

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON config file overlaying the defaults");
    app.add_option("--home", g.home, "working root (default $COMPOUND_DIFFUSION_HOME or ./runs)");
    app.add_option("--out", g.out, "output directory (default: per-run dir under the home)");
    app.add_option("--seed", g.seed, "seed override applied to every pipeline stage");
    app.add_flag("--quiet", g.quiet, "log only to files, not to the console");

    auto* gen = app.add_subcommand("gen-data", "render the synthetic compound-category corpus");

    PretrainOpts pre;
    auto* pretrain = app.add_subcommand("pretrain-encoders",
                                        "contrastive pretraining of the image/text encoders");
    pretrain->add_option("--corpus", pre.corpus, "corpus directory (from gen-data)")->required();
    pretrain->add_option("--epochs", pre.epochs, "pretraining epochs");

    TrainOpts tr;
    auto* train = app.add_subcommand("train", "diffusion training: full-UNet baseline or "
                                              "alignment-guided adapter fine-tuning (fdala)");
    train->add_option("--corpus", tr.corpus, "corpus directory")->required();
    train->add_option("--mode", tr.mode, "baseline | fdala")
        ->check(CLI::IsMember({"baseline", "fdala"}));
    train->add_option("--init", tr.init,
                      "starting checkpoint (baseline: pretrained encoders; fdala: baseline run)");
    train->add_flag("--resume", tr.resume, "continue from the latest epoch checkpoint in --out");
    train->add_flag("--no-align", tr.no_align, "fdala without the patch-concept alignment loss");
    train->add_option("--epochs", tr.epochs, "training epochs");
    train->add_option("--batch", tr.batch, "batch size");
    train->add_option("--max-steps", tr.max_steps, "stop after this many optimizer steps");

    SampleOpts sa;
    auto* sample = app.add_subcommand("sample", "guided reverse-diffusion sampling to PNG");
    sample->add_option("--checkpoint", sa.checkpoint, "training checkpoint directory")->required();
    sample->add_option("--category", sa.categories, "category prompt (repeatable)")->required();
    sample->add_option("--count", sa.count, "images per category")->check(CLI::PositiveNumber);
    sample->add_flag("--cfig", sa.cfig, "suppress standalone modifier objects with a "
                                        "negative prompt over the first gated steps");
    sample->add_option("--t-threshold", sa.t_threshold, "number of early steps the gate covers");
    sample->add_option("--guidance-scale", sa.guidance_scale, "guidance strength");
    sample->add_option("--guidance-mode", sa.guidance_mode, "standard-cfg | paper-literal")
        ->check(CLI::IsMember({"standard-cfg", "paper-literal"}));
    sample->add_option("--steps", sa.steps, "inference steps");
    sample->add_option("--sample-seed", sa.seed, "sampler seed (overrides --seed)");
    sample->add_option("--adapters", sa.adapters,
                       "force adapters on/off (default: on for fdala checkpoints)");
    sample->add_flag("--external-head", sa.external_head,
                     "resolve the head noun through the external endpoint");
    sample->add_option("--endpoint", sa.endpoint, "external head-noun endpoint URL");
    sample->add_option("--head-cache", sa.head_cache, "head-noun cache file");

    SampleOpts at;
    auto* attn = app.add_subcommand("attn", "sample one image and export cross-attention maps");
    attn->add_option("--checkpoint", at.checkpoint, "training checkpoint directory")->required();
    attn->add_option("--category", at.categories, "category prompt")->required();
    attn->add_option("--every", at.capture_every, "capture every Nth step (default 5)");
    attn->add_flag("--cfig", at.cfig, "gate a negative prompt over the early steps");
    attn->add_option("--t-threshold", at.t_threshold, "number of early steps the gate covers");
    attn->add_option("--guidance-scale", at.guidance_scale, "guidance strength");
    attn->add_option("--guidance-mode", at.guidance_mode, "standard-cfg | paper-literal")
        ->check(CLI::IsMember({"standard-cfg", "paper-literal"}));
    attn->add_option("--steps", at.steps, "inference steps");
    attn->add_option("--sample-seed", at.seed, "sampler seed (overrides --seed)");
    attn->add_option("--adapters", at.adapters,
                     "force adapters on/off (default: on for fdala checkpoints)");

    EvalOpts ev;
    auto* eval = app.add_subcommand("eval", "detector-based metrics over generated images");
    eval->add_option("--generated", ev.generated, "directory of images to score")->required();
    eval->add_option("--reference", ev.reference, "reference corpus directory")->required();
    eval->add_option("--checkpoint", ev.checkpoint,
                     "checkpoint supplying the feature extractor")->required();
    eval->add_option("--reference-split", ev.split, "reference split: test | train | all")
        ->check(CLI::IsMember({"test", "train", "all"}));
    eval->add_option("--detector", ev.detector_dir,
                     "detector cache directory (default <reference>/detector)");
    eval->add_option("--resamples", ev.resamples, "bootstrap resamples for the CIs");
    eval->add_option("--detector-epochs", ev.detector_epochs, "detector training epochs");

    HeadNounOpts hn;
    auto* head = app.add_subcommand("head-noun",
                                    "resolve category head nouns and negative prompts");
    head->add_option("--category", hn.categories, "category name (repeatable)")->required();
    head->add_flag("--external", hn.external, "ask the external endpoint (rule as fallback)");
    head->add_option("--endpoint", hn.endpoint, "external endpoint URL");
    head->add_option("--cache", hn.cache, "cache file (default <home>/headnoun_cache.jsonl)");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) cmd_gen_data(g);
        if (pretrain->parsed()) cmd_pretrain(g, pre);
        if (train->parsed()) cmd_train(g, tr);
        if (sample->parsed()) cmd_sample(g, sa);
        if (attn->parsed()) cmd_attn(g, at);
        if (eval->parsed()) cmd_eval(g, ev);
        if (head->parsed()) cmd_head_noun(g, hn);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "E_USAGE: " << one_line(e.what()) << " (see --help)\n";
        return 2;
    } catch (const cdiff::Error& e) {
        std::cerr << "E_" << error_code(e.code) << ": " << one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "E_INTERNAL: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cdiff/headnoun.hpp"
#include "cdiff/models.hpp"
#include "cdiff/png_io.hpp"
#include "cdiff/schedule.hpp"
#include "cdiff/unet.hpp"

namespace cdiff {

struct SampleOptions {
    SamplerConfig sampler;
    bool use_cfig = false;
    bool adapters = false;           // enable low-rank adapters in both towers
    std::string head_override;       // preresolved head noun; empty -> rule
    int capture_every = 0;           // 0 = no attention capture; N = every Nth step
};

struct StepAttention {
    int step_index = 0;  // 0-based inference step
    int timestep = 0;    // training-timestep index used at this step
    AttentionCapture capture;
};

struct SampleOutput {
    Tensor image;  // [3,H,W] in [-1,1]
    int negative_evals = 0;
    bool cfig_active = false;  // a negative prompt existed and the gate could fire
    std::vector<StepAttention> attention;
    std::vector<int> prompt_ids;  // positive prompt tokens (for attention export)
};

// Guided reverse-diffusion sampler. Per image: three text contexts are
// encoded once (unconditional = all-PAD, positive = category prompt,
// negative = modifier prompt when CFIG applies); every step runs the
// unconditional and positive branches, the negative branch only inside the
// early-step gate. The noise draw sequence is identical whether or not the
// gate fires, so disabling CFIG (or a gate that never fires) cannot shift
// any random stream.
inline SampleOutput sample_image(ModelBundle& m, const std::string& category, int sample_index,
                                 const SampleOptions& opt, std::ostream* log = nullptr) {
    opt.sampler.validate();
    const int size = m.cfg.corpus.image_size;

    TokenizedPrompt pos = m.category_prompt(category);
    Tensor ctx_pos = m.encode_prompt(pos.ids, opt.adapters);
    Tensor ctx_uncond = m.encode_prompt(m.pad_ids(), opt.adapters);

    SampleOutput out;
    out.prompt_ids = pos.ids;
    std::optional<Tensor> ctx_neg;
    if (opt.use_cfig) {
        std::string head =
            opt.head_override.empty() ? resolve_head_rule(category) : opt.head_override;
        auto neg_prompt = build_negative_prompt(category, head);
        if (neg_prompt) {
            ctx_neg = m.encode_prompt(tokenize(*neg_prompt, m.vocab).ids, opt.adapters);
            out.cfig_active = true;
            if (log)
                (*log) << "cfig: negative prompt \"" << *neg_prompt << "\" for the first "
                       << opt.sampler.t_threshold << " steps\n";
        } else if (log) {
            (*log) << "cfig: category '" << category
                   << "' has no modifier words; sampling proceeds as plain guidance\n";
        }
    }

    // without a negative context the gate window is empty by construction;
    // guided_epsilon would otherwise insist on the missing negative branch
    SamplerConfig step_cfg = opt.sampler;
    if (!out.cfig_active) step_cfg.t_threshold = 0;

    // one independent noise stream per (seed, sample index)
    Rng rng = Rng::stream(opt.sampler.seed, (uint64_t)sample_index);
    Tensor z = randn<float>({3, size, size}, rng);
    std::vector<int> taus = inference_timesteps(m.sched.t_train, opt.sampler.num_inference_steps);

    for (int k = 0; k < (int)taus.size(); k++) {
        int tau = taus[(size_t)k];
        bool want_capture = opt.capture_every > 0 && k % opt.capture_every == 0;
        AttentionCapture capture;

        Tensor eps_u, eps_pos, eps_neg;
        bool gated = out.cfig_active && k < opt.sampler.t_threshold;
        {
            GraphT<float> g;
            Var zv = g.leaf(z);
            eps_u = g.value(m.unet.predict(g, m.store, zv, tau, g.leaf(ctx_uncond), opt.adapters));
            eps_pos = g.value(m.unet.predict(g, m.store, zv, tau, g.leaf(ctx_pos), opt.adapters,
                                             want_capture ? &capture : nullptr));
            if (gated) {
                eps_neg = g.value(
                    m.unet.predict(g, m.store, zv, tau, g.leaf(*ctx_neg), opt.adapters));
                out.negative_evals++;
            }
        }
        Tensor eps = guided_epsilon(eps_u, eps_pos, gated ? &eps_neg : nullptr, k, step_cfg);
        Tensor xi = randn<float>({3, size, size}, rng);  // drawn every step for stream stability
        z = reverse_step(z, eps, tau + 1, &xi, m.sched);
        if (want_capture) out.attention.push_back({k, tau, std::move(capture)});
    }

    for (auto& v : z.data) v = std::min(1.f, std::max(-1.f, v));
    out.image = std::move(z);
    return out;
}

// ---------------------------------------------------------------------------
// Attention-map export: one grayscale PNG per (token, step, site), min-max
// normalized per map; uniform maps become flat 0.5 gray. An index file lists
// the exported token strings by position.
// ---------------------------------------------------------------------------
inline void export_attention(const std::string& dir, const std::vector<StepAttention>& steps,
                             const std::vector<int>& prompt_ids, const Vocabulary& vocab) {
    namespace fs = std::filesystem;
    if (steps.empty()) fail("attn", "no attention captures to export");
    fs::create_directories(dir);

    std::vector<std::pair<int, std::string>> tokens;  // (position, token string)
    for (size_t i = 0; i < prompt_ids.size(); i++)
        if (prompt_ids[i] != kPadId) tokens.emplace_back((int)i, vocab.token(prompt_ids[i]));

    {
        std::ofstream index(fs::path(dir) / "tokens.txt");
        if (!index) fail("io", "cannot write attention token index under " + dir);
        for (const auto& [pos, tok] : tokens) index << pos << "\t" << tok << "\n";
    }

    for (const auto& step : steps)
        for (const auto& site : step.capture.sites) {
            const Tensor& w = site.weights;  // [seq, h, wd]
            int h = w.shape[1], wd = w.shape[2];
            for (const auto& [pos, tok] : tokens) {
                float lo = w.at3(pos, 0, 0), hi = lo;
                for (int y = 0; y < h; y++)
                    for (int x = 0; x < wd; x++) {
                        lo = std::min(lo, w.at3(pos, y, x));
                        hi = std::max(hi, w.at3(pos, y, x));
                    }
                Tensor map({h, wd});
                for (int y = 0; y < h; y++)
                    for (int x = 0; x < wd; x++)
                        map.at2(y, x) =
                            hi > lo ? (w.at3(pos, y, x) - lo) / (hi - lo) : 0.5f;
                char name[128];
                std::snprintf(name, sizeof name, "step%03d_%s_tok%02d_%s.png", step.step_index,
                              site.site.c_str(), pos, tok.c_str());
                write_png_rgb((fs::path(dir) / name).string(), gray_to_u8(map));
            }
        }
}

}  // namespace cdiff

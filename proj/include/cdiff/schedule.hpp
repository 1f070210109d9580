#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// Fixed-variance DDPM noise schedule. alpha_bars[i] is the running product
// of alphas through index i; sigmas[i] = sqrt(betas[i]).
struct NoiseSchedule {
    int t_train = 0;
    std::vector<float> betas, alphas, alpha_bars, sigmas;

    static NoiseSchedule linear(int t_train, float beta_start = 1e-4f, float beta_end = 2e-2f) {
        if (t_train < 1) fail("schedule", "timestep count must be >= 1");
        if (!(0.f < beta_start && beta_start <= beta_end && beta_end < 1.f))
            fail("schedule", "beta range must satisfy 0 < start <= end < 1");
        NoiseSchedule s;
        s.t_train = t_train;
        s.betas.resize((size_t)t_train);
        s.alphas.resize((size_t)t_train);
        s.alpha_bars.resize((size_t)t_train);
        s.sigmas.resize((size_t)t_train);
        double prod = 1.0;
        for (int i = 0; i < t_train; i++) {
            double frac = t_train == 1 ? 0.0 : (double)i / (double)(t_train - 1);
            double beta = (double)beta_start + ((double)beta_end - (double)beta_start) * frac;
            prod *= 1.0 - beta;
            s.betas[(size_t)i] = (float)beta;
            s.alphas[(size_t)i] = (float)(1.0 - beta);
            s.alpha_bars[(size_t)i] = (float)prod;
            s.sigmas[(size_t)i] = (float)std::sqrt(beta);
        }
        return s;
    }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t a 0-based index.
inline Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.t_train) fail("schedule", "timestep " + std::to_string(t) + " out of range");
    if (!z0.same_shape(eps))
        fail("shape", "noise shape " + shape_str(eps.shape) + " != latent shape " + shape_str(z0.shape));
    float ab = s.alpha_bars[(size_t)t];
    float c0 = std::sqrt(ab), c1 = std::sqrt(1.f - ab);
    Tensor out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); i++)
        out.data[(size_t)i] = c0 * z0.data[(size_t)i] + c1 * eps.data[(size_t)i];
    return out;
}

// One denoising step z_t -> z_{t-1}. t is the 1-based timestep in
// [1, t_train]; the t = 1 step is deterministic (no injected noise).
inline Tensor reverse_step(const Tensor& zt, const Tensor& eps_pred, int t, const Tensor* xi,
                           const NoiseSchedule& s) {
    if (t < 1 || t > s.t_train) fail("schedule", "timestep " + std::to_string(t) + " out of range");
    if (!zt.same_shape(eps_pred))
        fail("shape", "prediction shape " + shape_str(eps_pred.shape) + " != latent shape " + shape_str(zt.shape));
    size_t i = (size_t)(t - 1);
    float beta = s.betas[i];
    float inv_sqrt_alpha = 1.f / std::sqrt(s.alphas[i]);
    float coef = beta / std::sqrt(1.f - s.alpha_bars[i]);
    bool add_noise = t > 1 && xi != nullptr;
    if (add_noise && !zt.same_shape(*xi))
        fail("shape", "xi shape " + shape_str(xi->shape) + " != latent shape " + shape_str(zt.shape));
    float sigma = s.sigmas[i];
    Tensor out(zt.shape);
    for (int64_t k = 0; k < zt.numel(); k++) {
        float v = inv_sqrt_alpha * (zt.data[(size_t)k] - coef * eps_pred.data[(size_t)k]);
        if (add_noise) v += sigma * xi->data[(size_t)k];
        out.data[(size_t)k] = v;
    }
    return out;
}

// Evenly spaced descending subsequence of {t_train-1 ... 0}, 0-based.
inline std::vector<int> inference_timesteps(int t_train, int num_steps) {
    if (num_steps < 1 || num_steps > t_train)
        fail("schedule", "inference step count " + std::to_string(num_steps) + " out of range for T=" +
                             std::to_string(t_train));
    std::vector<int> out((size_t)num_steps);
    if (num_steps == 1) {
        out[0] = t_train - 1;
        return out;
    }
    for (int k = 0; k < num_steps; k++)
        out[(size_t)k] =
            (int)std::llround((double)(t_train - 1) * (double)(num_steps - 1 - k) / (double)(num_steps - 1));
    return out;
}

enum class GuidanceMode { paper_literal, standard_cfg };

inline std::string guidance_mode_str(GuidanceMode m) {
    return m == GuidanceMode::paper_literal ? "paper-literal" : "standard-cfg";
}
inline GuidanceMode parse_guidance_mode(const std::string& s) {
    if (s == "paper-literal") return GuidanceMode::paper_literal;
    if (s == "standard-cfg") return GuidanceMode::standard_cfg;
    fail("config", "unknown guidance mode '" + s + "' (expected paper-literal or standard-cfg)");
}

struct SamplerConfig {
    int num_inference_steps = 50;
    float guidance_scale = 7.5f;
    int t_threshold = 5;  // inference-step index; steps < threshold use the negative prompt
    GuidanceMode guidance_mode = GuidanceMode::standard_cfg;
    uint64_t seed = 0;

    void validate() const {
        if (t_threshold < 0 || t_threshold > num_inference_steps)
            fail("config", "t_threshold must lie in [0, num_inference_steps]");
        if (guidance_scale < 0.f) fail("config", "guidance scale must be >= 0");
        if (num_inference_steps < 1) fail("config", "num_inference_steps must be >= 1");
    }
};

// Combines unconditional / positive / negative noise predictions. The
// negative branch is active for step_index < t_threshold only.
inline Tensor guided_epsilon(const Tensor& eps_u, const Tensor& eps_pos, const Tensor* eps_neg,
                             int step_index, const SamplerConfig& cfg) {
    if (!eps_u.same_shape(eps_pos))
        fail("shape", "guidance tensors disagree: " + shape_str(eps_u.shape) + " vs " + shape_str(eps_pos.shape));
    bool gated = step_index < cfg.t_threshold;
    if (gated && eps_neg == nullptr)
        fail("guidance", "negative prediction required for step " + std::to_string(step_index) +
                             " inside the gate window (t_threshold=" + std::to_string(cfg.t_threshold) + ")");
    if (gated && !eps_u.same_shape(*eps_neg))
        fail("shape", "negative prediction shape " + shape_str(eps_neg->shape) + " != " + shape_str(eps_u.shape));
    float lam = cfg.guidance_scale;
    Tensor out(eps_u.shape);
    for (int64_t i = 0; i < eps_u.numel(); i++) {
        float u = eps_u.data[(size_t)i], p = eps_pos.data[(size_t)i];
        float v;
        if (cfg.guidance_mode == GuidanceMode::paper_literal) {
            v = gated ? u + lam * (p - eps_neg->data[(size_t)i]) : u + lam * p;
        } else {
            v = gated ? eps_neg->data[(size_t)i] + lam * (p - eps_neg->data[(size_t)i])
                      : u + lam * (p - u);
        }
        out.data[(size_t)i] = v;
    }
    return out;
}

}  // namespace cdiff

#pragma once

// Umbrella header for the compound-category diffusion laboratory.

#include "cdiff/tensor.hpp"
#include "cdiff/graph.hpp"
#include "cdiff/adam.hpp"
#include "cdiff/params.hpp"
#include "cdiff/schedule.hpp"
#include "cdiff/vocab.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/text_encoder.hpp"
#include "cdiff/vision_encoder.hpp"
#include "cdiff/unet.hpp"
#include "cdiff/losses.hpp"
#include "cdiff/png_io.hpp"
#include "cdiff/synth.hpp"
#include "cdiff/frechet.hpp"
#include "cdiff/detector.hpp"
#include "cdiff/metrics.hpp"
#include "cdiff/headnoun.hpp"
#include "cdiff/checkpoint.hpp"
#include "cdiff/config.hpp"
#include "cdiff/models.hpp"
#include "cdiff/sampler.hpp"
#include "cdiff/trainer.hpp"
#include "cdiff/eval.hpp"

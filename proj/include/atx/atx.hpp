#pragma once

#include "atx/config.hpp"
#include "atx/denoiser.hpp"
#include "atx/diffusion.hpp"
#include "atx/feature_net.hpp"
#include "atx/grad_check.hpp"
#include "atx/guidance.hpp"
#include "atx/image_io.hpp"
#include "atx/mask_gen.hpp"
#include "atx/metrics.hpp"
#include "atx/nn.hpp"
#include "atx/ops.hpp"
#include "atx/rng.hpp"
#include "atx/synth.hpp"
#include "atx/tensor.hpp"
#include "atx/tnsr.hpp"
#include "atx/transfer.hpp"

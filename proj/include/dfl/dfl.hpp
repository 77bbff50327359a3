#pragma once

// Umbrella header for the defocuslab toolkit.

#include "dfl/adversarial.hpp"
#include "dfl/autodiff.hpp"
#include "dfl/checkpoint.hpp"
#include "dfl/common.hpp"
#include "dfl/config.hpp"
#include "dfl/conv_ops.hpp"
#include "dfl/dataset.hpp"
#include "dfl/defocus_estimation.hpp"
#include "dfl/generator.hpp"
#include "dfl/image_io.hpp"
#include "dfl/kernel_bank.hpp"
#include "dfl/metrics.hpp"
#include "dfl/nn.hpp"
#include "dfl/reblur.hpp"
#include "dfl/rng.hpp"
#include "dfl/wiener.hpp"

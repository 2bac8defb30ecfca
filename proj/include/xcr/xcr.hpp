#pragma once

#include "xcr/tensor.hpp"
#include "xcr/rng.hpp"
#include "xcr/format.hpp"
#include "xcr/autodiff.hpp"
#include "xcr/nn.hpp"
#include "xcr/data_io.hpp"
#include "xcr/explainer.hpp"
#include "xcr/training.hpp"
#include "xcr/metrics.hpp"
#include "xcr/corruptions.hpp"
#include "xcr/config.hpp"
#include "xcr/experiment.hpp"

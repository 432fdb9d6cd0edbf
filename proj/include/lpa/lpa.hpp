#pragma once

// Umbrella header for the attention-VGG library.

#include "lpa/attention.hpp"
#include "lpa/autodiff.hpp"
#include "lpa/checkpoint.hpp"
#include "lpa/data.hpp"
#include "lpa/heatmap.hpp"
#include "lpa/model.hpp"
#include "lpa/ops.hpp"
#include "lpa/tensor.hpp"
#include "lpa/train.hpp"

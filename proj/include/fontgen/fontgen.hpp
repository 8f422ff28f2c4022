#pragma once

#include "fontgen/autodiff.hpp"
#include "fontgen/checkpoint.hpp"
#include "fontgen/common.hpp"
#include "fontgen/config.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/embedding_analysis.hpp"
#include "fontgen/grid.hpp"
#include "fontgen/image_metrics.hpp"
#include "fontgen/losses.hpp"
#include "fontgen/model.hpp"
#include "fontgen/png_io.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"
#include "fontgen/training.hpp"

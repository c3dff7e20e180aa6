#pragma once

#include "simplexdiff/bench.hpp"
#include "simplexdiff/checkpoint.hpp"
#include "simplexdiff/config.hpp"
#include "simplexdiff/corpus.hpp"
#include "simplexdiff/error.hpp"
#include "simplexdiff/metrics.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/ops.hpp"
#include "simplexdiff/pipeline.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/sampler.hpp"
#include "simplexdiff/schedule.hpp"
#include "simplexdiff/simplex.hpp"
#include "simplexdiff/tensor.hpp"
#include "simplexdiff/trainer.hpp"

#pragma once

#include "tsam/error.hpp"
#include "tsam/mat.hpp"
#include "tsam/rng.hpp"
#include "tsam/numeric.hpp"
#include "tsam/stats.hpp"
#include "tsam/tensor_io.hpp"
#include "tsam/parallel.hpp"
#include "tsam/encoder.hpp"
#include "tsam/crossattn.hpp"
#include "tsam/guidance.hpp"
#include "tsam/sandbox.hpp"
#include "tsam/verify.hpp"
#include "tsam/analysis.hpp"
#include "tsam/config.hpp"
#include "tsam/cli.hpp"

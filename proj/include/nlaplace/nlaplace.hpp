#pragma once

#include "cli.hpp"
#include "complex_geometry.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "ilt.hpp"
#include "model.hpp"
#include "nn_core.hpp"
#include "rng.hpp"
#include "util.hpp"

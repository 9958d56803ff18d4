#pragma once

#include "ddl/checkpoint.hpp"
#include "ddl/clipio.hpp"
#include "ddl/config.hpp"
#include "ddl/errors.hpp"
#include "ddl/losses.hpp"
#include "ddl/masking.hpp"
#include "ddl/model.hpp"
#include "ddl/optim.hpp"
#include "ddl/pseudo.hpp"
#include "ddl/report.hpp"
#include "ddl/rng.hpp"
#include "ddl/scoring.hpp"
#include "ddl/synth.hpp"
#include "ddl/tensor.hpp"
#include "ddl/training.hpp"

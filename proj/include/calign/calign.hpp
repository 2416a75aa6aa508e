#pragma once

#include "calign/alignment.hpp"
#include "calign/autograd.hpp"
#include "calign/bottleneck.hpp"
#include "calign/cav.hpp"
#include "calign/config.hpp"
#include "calign/csv.hpp"
#include "calign/datasets.hpp"
#include "calign/encoders.hpp"
#include "calign/error.hpp"
#include "calign/evaluation.hpp"
#include "calign/experiments.hpp"
#include "calign/image.hpp"
#include "calign/objective.hpp"
#include "calign/optim.hpp"
#include "calign/rng.hpp"
#include "calign/training.hpp"

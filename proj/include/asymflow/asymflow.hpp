#pragma once

#include "asymflow/afmx.hpp"
#include "asymflow/checkpoint.hpp"
#include "asymflow/data.hpp"
#include "asymflow/error.hpp"
#include "asymflow/experiment.hpp"
#include "asymflow/latentlift.hpp"
#include "asymflow/losses.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/net.hpp"
#include "asymflow/param.hpp"
#include "asymflow/rng.hpp"
#include "asymflow/sampler.hpp"
#include "asymflow/subspace.hpp"
#include "asymflow/svd.hpp"
#include "asymflow/train.hpp"

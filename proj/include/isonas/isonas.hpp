#pragma once

#include "isonas/errors.hpp"
#include "isonas/tensor.hpp"
#include "isonas/random.hpp"
#include "isonas/linalg.hpp"
#include "isonas/layers.hpp"
#include "isonas/conv.hpp"
#include "isonas/tape.hpp"
#include "isonas/jacobian.hpp"
#include "isonas/quadrature.hpp"
#include "isonas/init.hpp"
#include "isonas/meanfield.hpp"
#include "isonas/search_space.hpp"
#include "isonas/blocks.hpp"
#include "isonas/sampler.hpp"
#include "isonas/supernet.hpp"
#include "isonas/dataset.hpp"
#include "isonas/trainer.hpp"
#include "isonas/scoring.hpp"
#include "isonas/cost.hpp"
#include "isonas/search.hpp"
#include "isonas/isometry.hpp"
#include "isonas/concentration.hpp"
#include "isonas/checkpoint.hpp"
#include "isonas/serialize.hpp"
#include "isonas/config.hpp"
#include "isonas/reports.hpp"
#include "isonas/pipeline.hpp"
#include "isonas/stats.hpp"
#include "isonas/correlation.hpp"

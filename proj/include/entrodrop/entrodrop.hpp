#pragma once

#include "entrodrop/bench.hpp"
#include "entrodrop/checkpoint.hpp"
#include "entrodrop/checksum.hpp"
#include "entrodrop/corpus.hpp"
#include "entrodrop/error.hpp"
#include "entrodrop/estimators.hpp"
#include "entrodrop/evaluation.hpp"
#include "entrodrop/importance.hpp"
#include "entrodrop/model.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/parallel.hpp"
#include "entrodrop/report.hpp"
#include "entrodrop/rng.hpp"
#include "entrodrop/special.hpp"
#include "entrodrop/svg.hpp"
#include "entrodrop/trace.hpp"
#include "entrodrop/training.hpp"

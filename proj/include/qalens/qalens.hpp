#pragma once

#include "qalens/autograd.hpp"
#include "qalens/data.hpp"
#include "qalens/errors.hpp"
#include "qalens/eval.hpp"
#include "qalens/gradcheck.hpp"
#include "qalens/headlens.hpp"
#include "qalens/matrix.hpp"
#include "qalens/model.hpp"
#include "qalens/rng.hpp"
#include "qalens/svg.hpp"
#include "qalens/tokenizer.hpp"
#include "qalens/training.hpp"

#pragma once

#include "adam.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "dataset.hpp"
#include "forecast.hpp"
#include "inference.hpp"
#include "model.hpp"
#include "random.hpp"
#include "synthgen.hpp"
#include "tape.hpp"
#include "tensor.hpp"

"""Random forest regression with out-of-bag residual variance estimation."""

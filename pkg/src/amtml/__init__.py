from amtml.kernels import BACKEND

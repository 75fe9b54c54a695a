# answer "no" twice, then refuse
Happy -> 1
Happy?1.Happy -> 1
default: fail

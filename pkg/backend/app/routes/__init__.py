# Backend routes package

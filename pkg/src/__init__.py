# Federated Mixture EM Package
